//! Minimal feed-forward network toolkit with explicit forward/backward passes.
//!
//! Activations are `batch x features` matrices. Convolutional layers read and
//! write channel-major (CHW) feature vectors; [`LayerSpec::AvgPool`] consumes
//! interleaved HWC pixels and emits CHW so an image can be fed directly.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Relu,
    Sigmoid,
    /// Square kernel convolution over a CHW input.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Non-overlapping box average, HWC in, CHW out.
    AvgPool {
        height: usize,
        width: usize,
        channels: usize,
        factor: usize,
    },
    L2Normalize,
    /// Softmax applied independently to `groups` equal-width slices.
    GroupSoftmax {
        groups: usize,
    },
    /// Fixed multiplication by a constant.
    Scale {
        factor: f64,
    },
}

const L2_EPS: f64 = 1e-12;

impl LayerSpec {
    pub fn conv_output_hw(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                height,
                width,
                kernel,
                stride,
                padding,
                ..
            } => Some((
                (height + 2 * padding - kernel) / stride + 1,
                (width + 2 * padding - kernel) / stride + 1,
            )),
            _ => None,
        }
    }

    /// Output width given input width; `None` when the input width is invalid.
    pub fn output_dim(&self, input: usize) -> Option<usize> {
        match *self {
            LayerSpec::Dense { input: i, output } => (i == input).then_some(output),
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::L2Normalize | LayerSpec::Scale { .. } => {
                Some(input)
            }
            LayerSpec::GroupSoftmax { groups } => {
                (groups > 0 && input % groups == 0).then_some(input)
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                height,
                width,
                ..
            } => {
                let (oh, ow) = self.conv_output_hw()?;
                (input == in_channels * height * width).then_some(out_channels * oh * ow)
            }
            LayerSpec::AvgPool {
                height,
                width,
                channels,
                factor,
            } => {
                let ok = factor > 0
                    && height % factor == 0
                    && width % factor == 0
                    && input == height * width * channels;
                ok.then_some(channels * (height / factor) * (width / factor))
            }
        }
    }

    fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, output } => input * output + output,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            _ => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. } => input,
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    fn fan_out(&self) -> usize {
        match *self {
            LayerSpec::Dense { output, .. } => output,
            LayerSpec::Conv2d { out_channels, .. } => out_channels,
            _ => 0,
        }
    }
}

/// Forward activations retained for a backward pass. `acts[i]` is the input
/// to layer `i`; the final entry is the network output.
pub struct ForwardCache {
    pub acts: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache always holds the input")
    }
}

/// Per-layer parameter gradients, shaped like [`Network::params`].
pub type Gradients = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    params: Vec<Vec<f64>>,
    input_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    input_dim: usize,
    layers: Vec<LayerSpec>,
}

impl Network {
    /// Builds a network with He-normal weights and zero biases. When
    /// `zero_last` is set the final parametric layer starts at exactly zero.
    pub fn new(input_dim: usize, specs: Vec<LayerSpec>, seed: u64, zero_last: bool) -> Result<Self> {
        let mut dim = input_dim;
        for (i, spec) in specs.iter().enumerate() {
            dim = spec.output_dim(dim).ok_or_else(|| {
                Error::Config(format!("layer {i} ({spec:?}) does not accept input width {dim}"))
            })?;
        }
        let last_param = specs.iter().rposition(|s| s.param_count() > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let n = spec.param_count();
                if n == 0 {
                    return Vec::new();
                }
                let mut p = vec![0.0; n];
                if !(zero_last && Some(i) == last_param) {
                    let std = (2.0 / spec.fan_in() as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let nw = n - spec.fan_out();
                    for w in &mut p[..nw] {
                        *w = normal.sample(&mut rng);
                    }
                }
                p
            })
            .collect();
        Ok(Self {
            specs,
            params,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs
            .iter()
            .fold(self.input_dim, |d, s| s.output_dim(d).expect("validated at construction"))
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Number of leading layers without parameters. Their output can be
    /// precomputed once for a fixed training set.
    pub fn frozen_prefix_len(&self) -> usize {
        self.specs
            .iter()
            .take_while(|s| s.param_count() == 0)
            .count()
    }

    /// Keeps only the first `n` layers.
    pub fn truncated(&self, n: usize) -> Network {
        Network {
            specs: self.specs[..n].to_vec(),
            params: self.params[..n].to_vec(),
            input_dim: self.input_dim,
        }
    }

    /// Sub-network of layers `start..` with the matching input width.
    pub fn suffix(&self, start: usize) -> Network {
        let input_dim = self.specs[..start]
            .iter()
            .fold(self.input_dim, |d, s| s.output_dim(d).expect("validated"));
        Network {
            specs: self.specs[start..].to_vec(),
            params: self.params[start..].to_vec(),
            input_dim,
        }
    }

    /// Copies the parameters of a network produced by [`Network::suffix`]
    /// back into layers `start..`.
    pub fn set_suffix_params(&mut self, start: usize, suffix: &Network) {
        for (dst, src) in self.params[start..].iter_mut().zip(suffix.params()) {
            dst.clone_from(src);
        }
    }

    pub fn forward(&self, input: Array2<f64>) -> ForwardCache {
        let mut acts = Vec::with_capacity(self.specs.len() + 1);
        acts.push(input);
        for (spec, params) in self.specs.iter().zip(&self.params) {
            let next = layer_forward(spec, params, acts.last().expect("non-empty"));
            acts.push(next);
        }
        ForwardCache { acts }
    }

    /// Output only, for inference.
    pub fn predict(&self, input: Array2<f64>) -> Array2<f64> {
        let mut x = input;
        for (spec, params) in self.specs.iter().zip(&self.params) {
            x = layer_forward(spec, params, &x);
        }
        x
    }

    pub fn predict_one(&self, input: &[f64]) -> Vec<f64> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        self.predict(x).into_raw_vec_and_offset().0
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the output of layer
    /// `end - 1`) down to the network input. Returns the input gradient and
    /// the parameter gradients of every layer (empty past `end`).
    pub fn backward_from(
        &self,
        cache: &ForwardCache,
        end: usize,
        grad_out: Array2<f64>,
    ) -> (Array2<f64>, Gradients) {
        let mut grads: Gradients = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut g = grad_out;
        for i in (0..end).rev() {
            g = layer_backward(
                &self.specs[i],
                &self.params[i],
                &cache.acts[i],
                &cache.acts[i + 1],
                g,
                &mut grads[i],
            );
        }
        (g, grads)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_out: Array2<f64>) -> (Array2<f64>, Gradients) {
        self.backward_from(cache, self.specs.len(), grad_out)
    }

    /// Vector-Jacobian product for a single input row.
    pub fn vjp_one(&self, input: &[f64], cotangent: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        let cache = self.forward(x);
        let out = cache.output().row(0).to_vec();
        let g = Array2::from_shape_vec((1, cotangent.len()), cotangent.to_vec()).expect("row");
        let (gin, _) = self.backward(&cache, g);
        (out, gin.into_raw_vec_and_offset().0)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let header = NetworkHeader {
            input_dim: self.input_dim,
            layers: self.specs.clone(),
        };
        let spec_path = dir.join(format!("{stem}.json"));
        fs::write(&spec_path, serde_json::to_string_pretty(&header)?)
            .map_err(|e| Error::io(&spec_path, e))?;
        let mut blob = Vec::with_capacity(self.param_count() * 8);
        for v in self.params.iter().flatten() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let w_path = dir.join(format!("{stem}.bin"));
        fs::write(&w_path, blob).map_err(|e| Error::io(&w_path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Network> {
        let spec_path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let header: NetworkHeader = serde_json::from_str(&text)?;
        let mut net = Network::new(header.input_dim, header.layers, 0, true)?;
        let w_path = dir.join(format!("{stem}.bin"));
        let blob = fs::read(&w_path).map_err(|e| Error::io(&w_path, e))?;
        if blob.len() != net.param_count() * 8 {
            return Err(Error::Input(format!(
                "{} holds {} bytes, architecture needs {}",
                w_path.display(),
                blob.len(),
                net.param_count() * 8
            )));
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for p in net.params.iter_mut().flatten() {
            *p = values.next().expect("length checked");
        }
        Ok(net)
    }
}

fn dense_views(params: &[f64], input: usize, output: usize) -> (ArrayView2<'_, f64>, &[f64]) {
    let w = ArrayView2::from_shape((output, input), &params[..input * output]).expect("dense shape");
    (w, &params[input * output..])
}

fn layer_forward(spec: &LayerSpec, params: &[f64], x: &Array2<f64>) -> Array2<f64> {
    match *spec {
        LayerSpec::Dense { input, output } => {
            let (w, b) = dense_views(params, input, output);
            let mut y = x.dot(&w.t());
            y += &ArrayView2::from_shape((1, output), b).expect("bias row");
            y
        }
        LayerSpec::Relu => x.mapv(|v| v.max(0.0)),
        LayerSpec::Sigmoid => x.mapv(sigmoid),
        LayerSpec::Scale { factor } => x * factor,
        LayerSpec::L2Normalize => {
            let mut y = x.clone();
            for mut row in y.rows_mut() {
                let n = (row.dot(&row) + L2_EPS).sqrt();
                row /= n;
            }
            y
        }
        LayerSpec::GroupSoftmax { groups } => {
            let mut y = x.clone();
            let width = x.ncols() / groups;
            for mut row in y.rows_mut() {
                for g in 0..groups {
                    let mut seg = row.slice_mut(s![g * width..(g + 1) * width]);
                    let m = seg.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    seg.mapv_inplace(|v| (v - m).exp());
                    let z = seg.sum();
                    seg /= z;
                }
            }
            y
        }
        LayerSpec::AvgPool {
            height,
            width,
            channels,
            factor,
        } => {
            let (oh, ow) = (height / factor, width / factor);
            let norm = 1.0 / (factor * factor) as f64;
            let mut y = Array2::zeros((x.nrows(), channels * oh * ow));
            for (xr, mut yr) in x.rows().into_iter().zip(y.rows_mut()) {
                let xs = xr.as_slice().expect("standard layout");
                let ys = yr.as_slice_mut().expect("standard layout");
                for iy in 0..height {
                    let oy = iy / factor;
                    for ix in 0..width {
                        let ox = ix / factor;
                        let base = (iy * width + ix) * channels;
                        for c in 0..channels {
                            ys[(c * oh + oy) * ow + ox] += xs[base + c] * norm;
                        }
                    }
                }
            }
            y
        }
        LayerSpec::Conv2d { .. } => conv_forward(spec, params, x),
    }
}

fn layer_backward(
    spec: &LayerSpec,
    params: &[f64],
    x: &Array2<f64>,
    y: &Array2<f64>,
    gy: Array2<f64>,
    gparams: &mut [f64],
) -> Array2<f64> {
    match *spec {
        LayerSpec::Dense { input, output } => {
            let (w, _) = dense_views(params, input, output);
            let gw = gy.t().dot(x);
            let gb = gy.sum_axis(Axis(0));
            let (gw_dst, gb_dst) = gparams.split_at_mut(input * output);
            for (d, s) in gw_dst.iter_mut().zip(gw.iter()) {
                *d += s;
            }
            for (d, s) in gb_dst.iter_mut().zip(gb.iter()) {
                *d += s;
            }
            gy.dot(&w)
        }
        LayerSpec::Relu => {
            let mut g = gy;
            g.zip_mut_with(x, |g, &xv| {
                if xv <= 0.0 {
                    *g = 0.0
                }
            });
            g
        }
        LayerSpec::Sigmoid => {
            let mut g = gy;
            g.zip_mut_with(y, |g, &yv| *g *= yv * (1.0 - yv));
            g
        }
        LayerSpec::Scale { factor } => gy * factor,
        LayerSpec::L2Normalize => {
            let mut g = gy;
            for (mut gr, xr) in g.rows_mut().into_iter().zip(x.rows()) {
                let n2 = xr.dot(&xr) + L2_EPS;
                let n = n2.sqrt();
                let xg = xr.dot(&gr);
                let coef = xg / (n2 * n);
                for (gv, &xv) in gr.iter_mut().zip(xr.iter()) {
                    *gv = *gv / n - xv * coef;
                }
            }
            g
        }
        LayerSpec::GroupSoftmax { groups } => {
            let mut g = gy;
            let width = y.ncols() / groups;
            for (mut gr, yr) in g.rows_mut().into_iter().zip(y.rows()) {
                for k in 0..groups {
                    let r = k * width..(k + 1) * width;
                    let ys = yr.slice(s![r.clone()]);
                    let mut gs = gr.slice_mut(s![r]);
                    let dot = ys.dot(&gs);
                    gs.zip_mut_with(&ys, |gv, &yv| *gv = yv * (*gv - dot));
                }
            }
            g
        }
        LayerSpec::AvgPool {
            height,
            width,
            channels,
            factor,
        } => {
            let (oh, ow) = (height / factor, width / factor);
            let norm = 1.0 / (factor * factor) as f64;
            let mut gx = Array2::zeros(x.raw_dim());
            for (gyr, mut gxr) in gy.rows().into_iter().zip(gx.rows_mut()) {
                let gys = gyr.as_slice().expect("standard layout");
                let gxs = gxr.as_slice_mut().expect("standard layout");
                for iy in 0..height {
                    let oy = iy / factor;
                    for ix in 0..width {
                        let ox = ix / factor;
                        let base = (iy * width + ix) * channels;
                        for c in 0..channels {
                            gxs[base + c] = gys[(c * oh + oy) * ow + ox] * norm;
                        }
                    }
                }
            }
            gx
        }
        LayerSpec::Conv2d { .. } => conv_backward(spec, params, x, &gy, gparams),
    }
}

struct ConvGeom {
    ic: usize,
    oc: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn of(spec: &LayerSpec) -> ConvGeom {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            height,
            width,
            kernel,
            stride,
            padding,
        } = *spec
        else {
            unreachable!("conv geometry requested for non-conv layer")
        };
        let (oh, ow) = spec.conv_output_hw().expect("conv layer");
        ConvGeom {
            ic: in_channels,
            oc: out_channels,
            h: height,
            w: width,
            k: kernel,
            stride,
            pad: padding,
            oh,
            ow,
        }
    }

    fn patch_len(&self) -> usize {
        self.ic * self.k * self.k
    }

    /// Calls `f(position, patch_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let p = oy * self.ow + ox;
                for c in 0..self.ic {
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = (c * self.k + ky) * self.k + kx;
                            let src = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(p, col, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Array2<f64> {
        let mut cols = Array2::zeros((self.oh * self.ow, self.patch_len()));
        let cs = cols.as_slice_mut().expect("fresh array");
        let pl = self.patch_len();
        self.for_each_tap(|p, col, src| cs[p * pl + col] = x[src]);
        cols
    }
}

fn conv_forward(spec: &LayerSpec, params: &[f64], x: &Array2<f64>) -> Array2<f64> {
    let g = ConvGeom::of(spec);
    let pl = g.patch_len();
    let w = ArrayView2::from_shape((g.oc, pl), &params[..g.oc * pl]).expect("conv weights");
    let b = &params[g.oc * pl..];
    let npos = g.oh * g.ow;
    let mut y = Array2::zeros((x.nrows(), g.oc * npos));
    for (xr, mut yr) in x.rows().into_iter().zip(y.rows_mut()) {
        let cols = g.im2col(xr.as_slice().expect("standard layout"));
        let out = cols.dot(&w.t()); // npos x oc
        let ys = yr.as_slice_mut().expect("standard layout");
        for p in 0..npos {
            for o in 0..g.oc {
                ys[o * npos + p] = out[[p, o]] + b[o];
            }
        }
    }
    y
}

fn conv_backward(
    spec: &LayerSpec,
    params: &[f64],
    x: &Array2<f64>,
    gy: &Array2<f64>,
    gparams: &mut [f64],
) -> Array2<f64> {
    let g = ConvGeom::of(spec);
    let pl = g.patch_len();
    let w = ArrayView2::from_shape((g.oc, pl), &params[..g.oc * pl]).expect("conv weights");
    let npos = g.oh * g.ow;
    let mut gx = Array2::zeros(x.raw_dim());
    let mut gw = Array2::<f64>::zeros((g.oc, pl));
    let mut gb = Array1::<f64>::zeros(g.oc);
    for ((xr, gyr), mut gxr) in x.rows().into_iter().zip(gy.rows()).zip(gx.rows_mut()) {
        let cols = g.im2col(xr.as_slice().expect("standard layout"));
        let gys = gyr.as_slice().expect("standard layout");
        let mut gout = Array2::<f64>::zeros((npos, g.oc));
        for o in 0..g.oc {
            for p in 0..npos {
                gout[[p, o]] = gys[o * npos + p];
            }
        }
        gw += &gout.t().dot(&cols);
        gb += &gout.sum_axis(Axis(0));
        let gcols = gout.dot(&w);
        let gcs = gcols.as_slice().expect("fresh array");
        let gxs = gxr.as_slice_mut().expect("standard layout");
        g.for_each_tap(|p, col, src| gxs[src] += gcs[p * pl + col]);
    }
    let (gw_dst, gb_dst) = gparams.split_at_mut(g.oc * pl);
    for (d, s) in gw_dst.iter_mut().zip(gw.iter()) {
        *d += s;
    }
    for (d, s) in gb_dst.iter_mut().zip(gb.iter()) {
        *d += s;
    }
    gx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

/// Adam (β1 0.9, β2 0.999, ε 1e-8) or plain SGD over a list of parameter tensors.
pub struct Optimizer {
    spec: OptimizerSpec,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(spec: OptimizerSpec, shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = match spec.kind {
            OptimizerKind::Adam => {
                let m: Vec<Vec<f64>> = shapes.into_iter().map(|n| vec![0.0; n]).collect();
                (m.clone(), m)
            }
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self { spec, step: 0, m, v }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Vec<f64>>, grads: &[Vec<f64>]) {
        self.step += 1;
        let lr = self.spec.learning_rate;
        match self.spec.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    for i in 0..p.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean over all elements of the squared error.
    Mse,
    /// Binary cross entropy on a sigmoid output layer (fused gradient).
    Bce,
    /// Softmax cross entropy on raw logits; targets are one-hot rows.
    SoftmaxCrossEntropy,
}

impl Loss {
    /// Loss value and gradient w.r.t. the *pre-activation* of the fused
    /// output for `Bce` (the sigmoid input) and w.r.t. the output otherwise.
    fn value_and_grad(self, out: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
        match self {
            Loss::Mse => {
                let n = out.len() as f64;
                let diff = out - target;
                let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
                (value, diff * (2.0 / n))
            }
            Loss::Bce => {
                let n = out.nrows() as f64;
                let mut value = 0.0;
                for (&p, &y) in out.iter().zip(target.iter()) {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    value -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                }
                ((value / n), (out - target) / n)
            }
            Loss::SoftmaxCrossEntropy => {
                let n = out.nrows() as f64;
                let mut grad = out.clone();
                let mut value = 0.0;
                for (mut gr, tr) in grad.rows_mut().into_iter().zip(target.rows()) {
                    let m = gr.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    gr.mapv_inplace(|v| (v - m).exp());
                    let z = gr.sum();
                    gr /= z;
                    for (g, &t) in gr.iter_mut().zip(tr.iter()) {
                        if t > 0.0 {
                            value -= t * g.max(1e-300).ln();
                        }
                        *g = (*g - t) / n;
                    }
                }
                (value / n, grad)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub loss: Loss,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub epochs: usize,
}

/// Mini-batch training with per-epoch seeded shuffling. Returns the
/// sample-weighted mean loss of every epoch.
pub fn train(
    net: &mut Network,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    spec: &TrainSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    if inputs.nrows() == 0 {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    if inputs.nrows() != targets.nrows() {
        return Err(Error::Input(format!(
            "{} inputs but {} targets",
            inputs.nrows(),
            targets.nrows()
        )));
    }
    if inputs.ncols() != net.input_dim() || targets.ncols() != net.output_dim() {
        return Err(Error::Config(format!(
            "data shape {}->{} does not match network {}->{}",
            inputs.ncols(),
            targets.ncols(),
            net.input_dim(),
            net.output_dim()
        )));
    }
    if spec.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let fused = spec.loss == Loss::Bce;
    if fused && net.specs().last() != Some(&LayerSpec::Sigmoid) {
        return Err(Error::Config("binary cross entropy needs a sigmoid output layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(spec.optimizer, net.params().iter().map(Vec::len));
    let mut order: Vec<usize> = (0..inputs.nrows()).collect();
    let mut log = Vec::with_capacity(spec.epochs);
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            let xb = inputs.select(Axis(0), chunk);
            let yb = targets.select(Axis(0), chunk);
            let cache = net.forward(xb);
            let (value, g) = spec.loss.value_and_grad(cache.output(), &yb);
            let n = net.specs().len();
            let (end, g) = if fused { (n - 1, g) } else { (n, g) };
            let (_, grads) = net.backward_from(&cache, end, g);
            opt.step(net.params_mut().iter_mut(), &grads);
            total += value * chunk.len() as f64;
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                step: log.len(),
                msg: "training loss became non-finite".into(),
                last_total: log.last().copied().unwrap_or(f64::NAN),
                last_latent: Vec::new(),
            });
        }
        log.push(mean);
    }
    Ok(log)
}

/// Stacks equal-length rows into a matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Input("rows have differing lengths".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), width), flat).expect("checked shape"))
}
