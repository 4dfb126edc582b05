//! Image quality, descriptor similarity and landmark accuracy measures.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::tensor::{Descriptor, ImageTensor, LandmarkSet, RangeTag};

/// Peak signal-to-noise ratio. Identical images have no finite PSNR and are
/// reported as [`Psnr::Infinite`], serialized as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid PSNR '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr: Psnr,
    pub ssim: f64,
}

pub const PSNR_PEAK: f64 = 255.0;

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse > 0.0 {
        Psnr::Finite(10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10())
    } else {
        Psnr::Infinite
    }
}

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Input(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if a.range() != b.range() {
        return Err(Error::Input("images have different range tags".into()));
    }
    Ok(())
}

/// MSE on the byte scale, PSNR with peak 255 and mean SSIM over channels.
pub fn image_metrics(a: &ImageTensor, b: &ImageTensor) -> Result<ImageMetrics> {
    check_pair(a, b)?;
    let mse = mse(a, b)?;
    Ok(ImageMetrics {
        mse,
        psnr: psnr_from_mse(mse),
        ssim: ssim(a, b)?,
    })
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let scale = 255.0 / a.range().max_value();
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| ((x - y) * scale).powi(2))
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filter of a single-channel `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (σ 1.5) and constants
/// `(0.01 L)^2`, `(0.03 L)^2`, L = 255, averaged over the valid region and
/// the three channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let ab = a.to_range(RangeTag::Byte);
    let bb = b.to_range(RangeTag::Byte);
    let mut total = 0.0;
    for c in 0..3 {
        let x = ab.channel(c);
        let y = bb.channel(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

pub fn cosine_similarity(d1: &Descriptor, d2: &Descriptor) -> Result<f64> {
    cosine(&d1.values, &d2.values)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "descriptor dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean point-to-point distance as a percentage of the ground-truth
/// interocular distance (eye-contour centroids).
pub fn landmark_error(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<f64> {
    let iod = gt.interocular();
    if !(iod > 1e-9) {
        return Err(Error::Input("ground-truth eye centroids coincide".into()));
    }
    let mean = pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .sum::<f64>()
        / pred.points().len() as f64;
    Ok(100.0 * mean / iod)
}

pub fn accuracy_pct(predicted: &[bool], actual: &[bool]) -> Result<f64> {
    if predicted.len() != actual.len() || actual.is_empty() {
        return Err(Error::Input("accuracy needs equal, non-empty label lists".into()));
    }
    let hits = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    Ok(100.0 * hits as f64 / actual.len() as f64)
}

/// Two-sided pooled two-proportion z-test. Returns `(z, p_value)`.
pub fn two_proportion_test(hits_a: usize, n_a: usize, hits_b: usize, n_b: usize) -> Result<(f64, f64)> {
    if n_a == 0 || n_b == 0 {
        return Err(Error::Input("two-proportion test needs non-empty samples".into()));
    }
    let (pa, pb) = (hits_a as f64 / n_a as f64, hits_b as f64 / n_b as f64);
    let pooled = (hits_a + hits_b) as f64 / (n_a + n_b) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n_a as f64 + 1.0 / n_b as f64)).sqrt();
    if se == 0.0 {
        return Ok(if pa == pb { (0.0, 1.0) } else { (f64::INFINITY, 0.0) });
    }
    let z = (pa - pb) / se;
    Ok((z, erfc(z.abs() / std::f64::consts::SQRT_2)))
}

pub const SIMILARITY_BINS: usize = 20;

/// Distribution of cosine scores between reconstruction and original descriptors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    /// Counts over [`SIMILARITY_BINS`] equal bins spanning `[-1, 1]`.
    pub histogram: Vec<usize>,
    pub scores: Vec<f64>,
}

pub fn similarity_report(pairs: &[(Descriptor, Descriptor)]) -> Result<SimilarityReport> {
    if pairs.is_empty() {
        return Err(Error::Input("similarity report needs at least one pair".into()));
    }
    let scores = pairs
        .iter()
        .map(|(r, o)| cosine_similarity(r, o))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_scores(scores))
}

pub fn summarize_scores(scores: Vec<f64>) -> SimilarityReport {
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mut histogram = vec![0; SIMILARITY_BINS];
    for s in &scores {
        let k = (((s + 1.0) / 2.0 * SIMILARITY_BINS as f64).floor() as usize).min(SIMILARITY_BINS - 1);
        histogram[k] += 1;
    }
    SimilarityReport {
        n,
        mean,
        median,
        std,
        histogram,
        scores,
    }
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,cosine\n");
        for (i, s) in self.scores.iter().enumerate() {
            writeln!(out, "{i},{s:.12}").expect("string write");
        }
        out
    }

    /// Bar chart of the score histogram.
    pub fn plot(&self) -> image::RgbImage {
        const W: u32 = 440;
        const H: u32 = 260;
        const MARGIN: u32 = 20;
        let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
        let max = self.histogram.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bar_w = (W - 2 * MARGIN) / SIMILARITY_BINS as u32;
        let plot_h = (H - 2 * MARGIN) as f64;
        for (k, &c) in self.histogram.iter().enumerate() {
            let bh = (c as f64 / max * plot_h).round() as u32;
            let x0 = MARGIN + k as u32 * bar_w;
            for x in x0 + 1..x0 + bar_w - 1 {
                for y in (H - MARGIN - bh)..(H - MARGIN) {
                    img.put_pixel(x, y, image::Rgb([40, 70, 160]));
                }
            }
        }
        for x in MARGIN..W - MARGIN {
            img.put_pixel(x, H - MARGIN, image::Rgb([0, 0, 0]));
        }
        // mean marker
        let mx = MARGIN as f64 + (self.mean + 1.0) / 2.0 * (W - 2 * MARGIN) as f64;
        let mx = (mx.round() as u32).clamp(MARGIN, W - MARGIN - 1);
        for y in MARGIN..H - MARGIN {
            img.put_pixel(mx, y, image::Rgb([200, 30, 30]));
        }
        img
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>.png` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        self.plot()
            .save_with_format(dir.join(format!("{stem}.png")), image::ImageFormat::Png)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::LANDMARK_COUNT;

    fn img(v: f64) -> ImageTensor {
        ImageTensor::filled(16, 16, RangeTag::Byte, [v; 3]).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = img(100.0);
        let m = image_metrics(&a, &a).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.psnr, Psnr::Infinite);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert_eq!(serde_json::to_value(m).unwrap()["psnr"], "inf");
    }

    #[test]
    fn black_vs_white() {
        let m = image_metrics(&img(0.0), &img(255.0)).unwrap();
        assert_eq!(m.mse, 255.0 * 255.0);
        assert_eq!(m.psnr, Psnr::Finite(0.0));
    }

    #[test]
    fn mismatched_images_rejected() {
        let small = ImageTensor::filled(12, 16, RangeTag::Byte, [0.0; 3]).unwrap();
        assert!(matches!(image_metrics(&img(0.0), &small), Err(Error::Input(_))));
        let unit = ImageTensor::filled(16, 16, RangeTag::Unit, [0.0; 3]).unwrap();
        assert!(matches!(image_metrics(&img(0.0), &unit), Err(Error::Input(_))));
    }

    #[test]
    fn psnr_round_trips_through_json() {
        for p in [Psnr::Finite(12.5), Psnr::Infinite] {
            let s = serde_json::to_string(&p).unwrap();
            assert_eq!(serde_json::from_str::<Psnr>(&s).unwrap(), p);
        }
    }

    #[test]
    fn cosine_edge_cases() {
        let d = |v: Vec<f64>| Descriptor::new(v, "t").unwrap();
        assert!((cosine_similarity(&d(vec![1.0, 2.0]), &d(vec![1.0, 2.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&d(vec![1.0, 0.0]), &d(vec![0.0, 3.0])).unwrap(), 0.0);
        assert!(cosine_similarity(&d(vec![0.0, 0.0]), &d(vec![1.0, 0.0])).is_err());
        assert!(cosine_similarity(&d(vec![1.0]), &d(vec![1.0, 0.0])).is_err());
    }

    fn face_like() -> LandmarkSet {
        let mut pts: Vec<[f64; 2]> = (0..LANDMARK_COUNT).map(|i| [i as f64, (i * 3 % 17) as f64]).collect();
        for p in &mut pts[36..42] {
            *p = [80.0, 100.0];
        }
        for p in &mut pts[42..48] {
            *p = [130.0, 100.0];
        }
        LandmarkSet::new(pts).unwrap()
    }

    #[test]
    fn landmark_error_analytic_cases() {
        let gt = face_like();
        assert_eq!(landmark_error(&gt, &gt).unwrap(), 0.0);
        let shifted = gt.translated(gt.interocular(), 0.0);
        assert!((landmark_error(&shifted, &gt).unwrap() - 100.0).abs() < 1e-12);
        let degenerate = LandmarkSet::new(vec![[5.0, 5.0]; LANDMARK_COUNT]).unwrap();
        assert!(landmark_error(&gt, &degenerate).is_err());
    }

    #[test]
    fn similarity_report_basics() {
        let d = Descriptor::new(vec![0.3, -0.2, 0.9], "t").unwrap();
        let r = similarity_report(&[(d.clone(), d.clone()), (d.clone(), d)]).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-12);
        assert_eq!(r.histogram[SIMILARITY_BINS - 1], 2);
        assert!(similarity_report(&[]).is_err());
        let r = summarize_scores(vec![0.1, 0.5, 0.3, 0.9]);
        assert!((r.mean - 0.45).abs() < 1e-15);
        assert!((r.median - 0.4).abs() < 1e-15);
    }

    #[test]
    fn two_proportion_test_behaviour() {
        let (z, p) = two_proportion_test(50, 100, 50, 100).unwrap();
        assert_eq!((z, p), (0.0, 1.0));
        let (_, p) = two_proportion_test(90, 100, 50, 100).unwrap();
        assert!(p < 1e-6);
        // pooled 0.55, se = sqrt(0.55 * 0.45 * 0.02)
        let (z, p) = two_proportion_test(60, 100, 50, 100).unwrap();
        assert!((z - 0.1 / (0.55f64 * 0.45 * 0.02).sqrt()).abs() < 1e-12);
        assert!((p - 0.1552).abs() < 1e-3);
    }

    fn random_image(seed: u64) -> ImageTensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px = (0..20 * 20 * 3).map(|_| rng.random_range(0.0..255.0)).collect();
        ImageTensor::new(20, 20, RangeTag::Byte, px).unwrap()
    }

    proptest! {
        #[test]
        fn psnr_agrees_with_mse(a in 0u64..1000, b in 1000u64..2000) {
            let m = image_metrics(&random_image(a), &random_image(b)).unwrap();
            let Psnr::Finite(p) = m.psnr else { panic!("finite images gave infinite psnr") };
            prop_assert!((p - 10.0 * (255.0f64 * 255.0 / m.mse).log10()).abs() < 1e-9);
        }

        #[test]
        fn ssim_is_symmetric_and_bounded(a in 0u64..1000, b in 1000u64..2000) {
            let (x, y) = (random_image(a), random_image(b));
            let s = ssim(&x, &y).unwrap();
            prop_assert_eq!(s, ssim(&y, &x).unwrap());
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn cosine_is_scale_invariant(v in proptest::collection::vec(-5.0f64..5.0, 8), w in proptest::collection::vec(-5.0f64..5.0, 8), alpha in 0.01f64..100.0) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3) && w.iter().any(|x| x.abs() > 1e-3));
            let scaled: Vec<f64> = v.iter().map(|x| alpha * x).collect();
            let c = cosine(&v, &w).unwrap();
            prop_assert!((cosine(&scaled, &w).unwrap() - c).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        }

        #[test]
        fn landmark_error_translation_and_scale(dx in -50.0f64..50.0, dy in -50.0f64..50.0, jitter in proptest::collection::vec(-3.0f64..3.0, 136), k in 0.1f64..10.0) {
            let gt = face_like();
            let pred = LandmarkSet::from_flat(
                &gt.to_flat().iter().zip(&jitter).map(|(a, j)| a + j).collect::<Vec<_>>(),
            )
            .unwrap();
            let base = landmark_error(&pred, &gt).unwrap();
            let moved = landmark_error(&pred.translated(dx, dy), &gt.translated(dx, dy)).unwrap();
            prop_assert!((moved - base).abs() <= 1e-9 * base.max(1e-12));
            let scaled = LandmarkSet::from_flat(
                &gt.to_flat().iter().zip(&jitter).map(|(a, j)| a + k * j).collect::<Vec<_>>(),
            )
            .unwrap();
            let e = landmark_error(&scaled, &gt).unwrap();
            prop_assert!((e - k * base).abs() <= 1e-9 * e.max(1e-12));
        }
    }
}
