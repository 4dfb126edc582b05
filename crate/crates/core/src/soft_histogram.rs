//! Hard and sigmoid-relaxed RGB histograms, and the 1-D Earth Mover's distance.
//!
//! Bin `k` (0-based) of a soft histogram is
//! `Σ_j f(x_j - c_k + δ/2) - f(x_j - c_k - δ/2)` with `f(t) = sigmoid(σ t)`,
//! bin width `δ = (max - min) / N` and centers `c_k = min + δ (k + 0.5)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::tensor::{ImageTensor, RangeTag};

/// Logit magnitude beyond which a sigmoid is treated as saturated. At 40
/// the exact value differs from 0 or 1 by less than 5e-18.
const SATURATION: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub min: f64,
    pub max: f64,
    pub n: usize,
    pub sigma: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            min: 0.0,
            max: 255.0,
            n: 10,
            sigma: 1.85,
        }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.max > self.min) {
            return Err(Error::Config(format!(
                "histogram range [{}, {}] must be finite with max > min",
                self.min, self.max
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.n as f64
    }

    /// Center of 0-based bin `k`.
    pub fn center(&self, k: usize) -> f64 {
        self.min + self.bin_width() * (k as f64 + 0.5)
    }

    /// Bin edges `min + δ k` for `k = 0..=N`.
    pub fn edges(&self) -> Vec<f64> {
        let d = self.bin_width();
        (0..=self.n).map(|k| self.min + d * k as f64).collect()
    }
}

/// Counts of `values` per bin. Half-open bins `[lo, hi)` with the last bin
/// closed, so a value on an interior edge lands in the higher bin.
pub fn hard_histogram(values: &[f64], spec: &HistogramSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut bins = vec![0.0; spec.n];
    let d = spec.bin_width();
    for &v in values {
        if !(v >= spec.min && v <= spec.max) {
            return Err(Error::Input(format!(
                "value {v} outside histogram range [{}, {}]",
                spec.min, spec.max
            )));
        }
        let k = (((v - spec.min) / d).floor() as usize).min(spec.n - 1);
        bins[k] += 1.0;
    }
    Ok(bins)
}

/// Sigmoid-relaxed histogram. Values outside `[min, max]` are allowed and
/// leak mass softly.
pub fn soft_histogram(values: &[f64], spec: &HistogramSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite histogram input {v}")));
    }
    let edges = spec.edges();
    let mut bins = vec![0.0; spec.n];
    let mut f = vec![0.0; edges.len()];
    for &x in values {
        edge_sigmoids(x, &edges, spec.sigma, &mut f);
        for k in 0..spec.n {
            bins[k] += f[k] - f[k + 1];
        }
    }
    Ok(bins)
}

/// Gradient of `Σ_k w_k H_k` w.r.t. each input value.
pub fn soft_histogram_vjp(values: &[f64], spec: &HistogramSpec, weights: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    if weights.len() != spec.n {
        return Err(Error::Input(format!(
            "expected {} bin weights, got {}",
            spec.n,
            weights.len()
        )));
    }
    let edges = spec.edges();
    let mut df = vec![0.0; edges.len()];
    Ok(values
        .iter()
        .map(|&x| {
            edge_sigmoid_slopes(x, &edges, spec.sigma, &mut df);
            (0..spec.n).map(|k| weights[k] * (df[k] - df[k + 1])).sum()
        })
        .collect())
}

/// `f(x - e)` for every edge, skipping exponentials that saturate.
fn edge_sigmoids(x: f64, edges: &[f64], sigma: f64, out: &mut [f64]) {
    for (o, &e) in out.iter_mut().zip(edges) {
        let t = sigma * (x - e);
        *o = if t > SATURATION {
            1.0
        } else if t < -SATURATION {
            0.0
        } else {
            sigmoid(t)
        };
    }
}

/// `d/dx f(x - e)` for every edge.
fn edge_sigmoid_slopes(x: f64, edges: &[f64], sigma: f64, out: &mut [f64]) {
    for (o, &e) in out.iter_mut().zip(edges) {
        let t = sigma * (x - e);
        *o = if t.abs() > SATURATION {
            0.0
        } else {
            let s = sigmoid(t);
            sigma * s * (1.0 - s)
        };
    }
}

/// Per-channel histogram of an RGB image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub spec: HistogramSpec,
    /// One row per color channel.
    pub bins: [Vec<f64>; 3],
    pub normalized: bool,
}

impl Histogram {
    /// Builds a normalized histogram from a flat `3 x N` row-major vector.
    pub fn from_flat(spec: HistogramSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != 3 * spec.n {
            return Err(Error::Input(format!(
                "expected {} histogram values, got {}",
                3 * spec.n,
                flat.len()
            )));
        }
        let row = |c: usize| flat[c * spec.n..(c + 1) * spec.n].to_vec();
        Ok(Self {
            spec,
            bins: [row(0), row(1), row(2)],
            normalized: true,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.bins.iter().flatten().copied().collect()
    }

    /// Every row nonnegative and summing to 1 within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.bins
            .iter()
            .all(|r| r.iter().all(|&v| v >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= tol)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn byte_channels(image: &ImageTensor) -> [Vec<f64>; 3] {
    let byte = image.to_range(RangeTag::Byte);
    [byte.channel(0), byte.channel(1), byte.channel(2)]
}

/// Hard per-channel histogram of the byte-scaled image, normalized by pixel count.
pub fn hard_image_histogram(image: &ImageTensor, spec: &HistogramSpec) -> Result<Histogram> {
    let m = (image.height() * image.width()) as f64;
    let [r, g, b] = byte_channels(image);
    let norm = |v: Vec<f64>| v.into_iter().map(|x| x / m).collect::<Vec<_>>();
    Ok(Histogram {
        spec: *spec,
        bins: [
            norm(hard_histogram(&r, spec)?),
            norm(hard_histogram(&g, spec)?),
            norm(hard_histogram(&b, spec)?),
        ],
        normalized: true,
    })
}

/// Soft per-channel histogram of the byte-scaled image, normalized by pixel count.
pub fn soft_image_histogram(image: &ImageTensor, spec: &HistogramSpec) -> Result<Histogram> {
    let m = (image.height() * image.width()) as f64;
    let [r, g, b] = byte_channels(image);
    let norm = |v: Vec<f64>| v.into_iter().map(|x| x / m).collect::<Vec<_>>();
    Ok(Histogram {
        spec: *spec,
        bins: [
            norm(soft_histogram(&r, spec)?),
            norm(soft_histogram(&g, spec)?),
            norm(soft_histogram(&b, spec)?),
        ],
        normalized: true,
    })
}

/// Gradient of `Σ_{c,k} w_{c,k} H_{c,k}(image)` w.r.t. the image pixels, in
/// the image's own range. `weights` is the flat `3 x N` cotangent.
pub fn soft_image_histogram_vjp(
    image: &ImageTensor,
    spec: &HistogramSpec,
    weights: &[f64],
) -> Result<Vec<f64>> {
    if weights.len() != 3 * spec.n {
        return Err(Error::Input(format!(
            "expected {} histogram cotangents, got {}",
            3 * spec.n,
            weights.len()
        )));
    }
    let m = (image.height() * image.width()) as f64;
    let to_byte = 255.0 / image.range().max_value();
    let channels = byte_channels(image);
    let mut grad = vec![0.0; image.pixels().len()];
    for (c, values) in channels.iter().enumerate() {
        let g = soft_histogram_vjp(values, spec, &weights[c * spec.n..(c + 1) * spec.n])?;
        for (i, gv) in g.into_iter().enumerate() {
            grad[i * 3 + c] = gv * to_byte / m;
        }
    }
    Ok(grad)
}

/// Mean over channels of the 1-D Earth Mover's distance, in bin-index units,
/// computed as the L1 distance between cumulative sums.
pub fn emd(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::Input("histograms use different bin specifications".into()));
    }
    if !(a.normalized && b.normalized) {
        return Err(Error::Input("EMD is defined on normalized histograms".into()));
    }
    let per_channel: f64 = a
        .bins
        .iter()
        .zip(&b.bins)
        .map(|(ra, rb)| {
            let mut cdf = 0.0;
            let mut dist = 0.0;
            for (x, y) in ra.iter().zip(rb) {
                cdf += x - y;
                dist += cdf.abs();
            }
            dist
        })
        .sum();
    Ok(per_channel / 3.0)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;

    #[test]
    fn spec_rejects_degenerate_parameters() {
        for spec in [
            HistogramSpec { max: 0.0, ..Default::default() },
            HistogramSpec { n: 0, ..Default::default() },
            HistogramSpec { sigma: 0.0, ..Default::default() },
        ] {
            assert!(matches!(spec.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn hard_histogram_basics() {
        let spec = HistogramSpec::default();
        assert_eq!(hard_histogram(&[], &spec).unwrap(), vec![0.0; 10]);
        let h = hard_histogram(&[spec.center(0), spec.center(0), spec.center(2)], &spec).unwrap();
        assert_eq!(h, vec![2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // interior edge goes up, the top edge stays in the last bin
        let h = hard_histogram(&[25.5, 255.0, 0.0], &spec).unwrap();
        assert_eq!((h[0], h[1], h[9]), (1.0, 1.0, 1.0));
        assert!(matches!(hard_histogram(&[256.0], &spec), Err(Error::Input(_))));
        assert!(matches!(hard_histogram(&[-0.1], &spec), Err(Error::Input(_))));
    }

    #[test]
    fn soft_histogram_center_mass() {
        let spec = HistogramSpec::default();
        let h = soft_histogram(&[spec.center(4)], &spec).unwrap();
        let expected = 2.0 * sigmoid(spec.sigma * spec.bin_width() / 2.0) - 1.0;
        assert!((h[4] - expected).abs() < 1e-15);
        assert!((h[4] - 1.0).abs() < 1e-9);
        assert_eq!(soft_histogram(&[], &spec).unwrap(), vec![0.0; 10]);
    }

    #[test]
    fn soft_histogram_rejects_non_finite() {
        assert!(soft_histogram(&[f64::NAN], &HistogramSpec::default()).is_err());
    }

    #[test]
    fn soft_histogram_out_of_range_leaks_mass() {
        let spec = HistogramSpec::default();
        let h = soft_histogram(&[-1.0, 256.0], &spec).unwrap();
        assert!(h.iter().all(|v| *v >= 0.0));
        assert!(h.iter().sum::<f64>() < 0.5);
    }

    #[test]
    fn emd_one_hot_distance() {
        let spec = HistogramSpec::default();
        let one_hot = |k: usize| {
            let mut r = vec![0.0; 10];
            r[k] = 1.0;
            Histogram { spec, bins: [r.clone(), r.clone(), r], normalized: true }
        };
        assert_eq!(emd(&one_hot(0), &one_hot(3)).unwrap(), 3.0);
        assert_eq!(emd(&one_hot(5), &one_hot(5)).unwrap(), 0.0);
        let other = Histogram { spec: HistogramSpec { n: 10, sigma: 2.0, ..spec }, ..one_hot(1) };
        assert!(emd(&one_hot(0), &other).is_err());
    }

    #[test]
    fn histogram_json_shape() {
        let spec = HistogramSpec::default();
        let h = Histogram::from_flat(spec, &[0.1; 30]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&h).unwrap();
        assert_eq!(v["spec"]["n"], 10);
        assert_eq!(v["bins"].as_array().unwrap().len(), 3);
        assert_eq!(v["normalized"], true);
        let back: Histogram = serde_json::from_value(v).unwrap();
        assert_eq!(back, h);
    }

    fn normalized_row(raw: &[f64]) -> Vec<f64> {
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    }

    fn normalized(raw: &[Vec<f64>]) -> Histogram {
        Histogram {
            spec: HistogramSpec::default(),
            bins: [normalized_row(&raw[0]), normalized_row(&raw[1]), normalized_row(&raw[2])],
            normalized: true,
        }
    }

    fn raw_histogram() -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 10), 3)
    }

    #[test]
    fn softness_is_monotone_away_from_edges() {
        let spec = HistogramSpec::default();
        let d = spec.bin_width();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..200)
            .map(|_| {
                let k = rng.random_range(0..spec.n);
                spec.center(k) + rng.random_range(-0.25..0.25) * d
            })
            .collect();
        let hard = hard_histogram(&values, &spec).unwrap();
        let mut last = f64::INFINITY;
        for sigma in [1.85, 10.0, 50.0, 200.0] {
            let soft = soft_histogram(&values, &HistogramSpec { sigma, ..spec }).unwrap();
            let err = soft.iter().zip(&hard).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= last, "sigma {sigma}: {err} > {last}");
            last = err;
        }
    }

    #[test]
    fn gradient_does_not_vanish_at_default_sigma() {
        let spec = HistogramSpec::default();
        let x = [spec.center(4) + 0.4 * spec.bin_width()];
        let grads: Vec<f64> = (0..spec.n)
            .map(|k| {
                let mut w = vec![0.0; spec.n];
                w[k] = 1.0;
                soft_histogram_vjp(&x, &spec, &w).unwrap()[0]
            })
            .collect();
        assert!(grads.iter().map(|g| g * g).sum::<f64>().sqrt() > 1e-4);
    }

    proptest! {
        #[test]
        fn telescoping_mass(values in proptest::collection::vec(-20.0f64..275.0, 1..64), sigma in 0.5f64..60.0) {
            let spec = HistogramSpec { sigma, ..HistogramSpec::default() };
            let h = soft_histogram(&values, &spec).unwrap();
            let mass: f64 = values
                .iter()
                .map(|x| sigmoid(sigma * (x - spec.min)) - sigmoid(sigma * (x - spec.max)))
                .sum();
            prop_assert!((h.iter().sum::<f64>() - mass).abs() <= 1e-6);
            prop_assert!(h.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn vjp_matches_finite_differences(x in 1.0f64..254.0, w in proptest::collection::vec(-1.0f64..1.0, 10)) {
            let spec = HistogramSpec::default();
            let f = |v: f64| -> f64 {
                soft_histogram(&[v], &spec).unwrap().iter().zip(&w).map(|(h, w)| h * w).sum()
            };
            let h = 1e-5;
            let num = (f(x + h) - f(x - h)) / (2.0 * h);
            let g = soft_histogram_vjp(&[x], &spec, &w).unwrap()[0];
            prop_assert!((g - num).abs() <= 1e-6 * (1.0 + num.abs()));
        }

        #[test]
        fn emd_symmetry(a in raw_histogram(), b in raw_histogram()) {
            let (a, b) = (normalized(&a), normalized(&b));
            prop_assert_eq!(emd(&a, &b).unwrap(), emd(&b, &a).unwrap());
            prop_assert_eq!(emd(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn emd_triangle_inequality(a in raw_histogram(), b in raw_histogram(), c in raw_histogram()) {
            let (a, b, c) = (normalized(&a), normalized(&b), normalized(&c));
            let ac = emd(&a, &c).unwrap();
            prop_assert!(ac <= emd(&a, &b).unwrap() + emd(&b, &c).unwrap() + 1e-12);
        }
    }
}
