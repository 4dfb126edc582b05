//! Procedural, fully differentiable face renderer used as the desk-scale generator.
//!
//! A face is a stack of soft masks (face ellipse, brows, eyes, nose, mouth
//! band, hat) alpha-composited over a flat background and scaled by a global
//! brightness. Every mask is a smooth function of the pixel position and of
//! a handful of geometric quantities, which are themselves smooth functions
//! of the twelve [`ToyFaceParams`]. Landmarks are read off the same geometry,
//! so they are exact by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::tensor::{ImageTensor, LandmarkSet, RangeTag, CROP_SIZE, LANDMARK_COUNT};

pub const ID_DIM: usize = 5;
pub const NONID_DIM: usize = 7;
pub const PARAM_DIM: usize = ID_DIM + NONID_DIM;

/// Names and closed bounds of every parameter, identity factors first.
pub const PARAM_BOUNDS: [(&str, f64, f64); PARAM_DIM] = [
    ("face_half_width", 50.0, 70.0),
    ("face_half_height", 68.0, 88.0),
    ("eye_half_spacing", 18.0, 30.0),
    ("eye_height", -30.0, -14.0),
    ("skin_tone", 0.0, 1.0),
    ("yaw", -1.0, 1.0),
    ("smile", -1.0, 1.0),
    ("hat", 0.0, 1.0),
    ("background_r", 0.0, 1.0),
    ("background_g", 0.0, 1.0),
    ("background_b", 0.0, 1.0),
    ("brightness", 0.6, 1.0),
];

pub const YAW: usize = 5;
pub const SMILE: usize = 6;
pub const HAT: usize = 7;
pub const BACKGROUND: [usize; 3] = [8, 9, 10];
pub const BRIGHTNESS: usize = 11;

/// Smile values above this are labelled smiling.
pub const SMILE_THRESHOLD: f64 = 0.0;
/// Hat strengths above this are labelled wearing a hat.
pub const HAT_THRESHOLD: f64 = 0.5;

/// Parameters of one toy face: `id_part ∥ nonid_part`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFaceParams {
    pub id_part: [f64; ID_DIM],
    pub nonid_part: [f64; NONID_DIM],
}

/// Binary attributes known exactly for every toy render.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLabels {
    pub smiling: bool,
    pub wearing_hat: bool,
}

impl ToyFaceParams {
    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() != PARAM_DIM {
            return Err(Error::Input(format!(
                "expected {PARAM_DIM} toy parameters, got {}",
                v.len()
            )));
        }
        let mut id_part = [0.0; ID_DIM];
        let mut nonid_part = [0.0; NONID_DIM];
        id_part.copy_from_slice(&v[..ID_DIM]);
        nonid_part.copy_from_slice(&v[ID_DIM..]);
        Ok(Self { id_part, nonid_part })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.id_part.iter().chain(&self.nonid_part).copied().collect()
    }

    pub fn get(&self, i: usize) -> f64 {
        if i < ID_DIM {
            self.id_part[i]
        } else {
            self.nonid_part[i - ID_DIM]
        }
    }

    pub fn set(&mut self, i: usize, value: f64) {
        if i < ID_DIM {
            self.id_part[i] = value
        } else {
            self.nonid_part[i - ID_DIM] = value
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (name, lo, hi)) in PARAM_BOUNDS.iter().enumerate() {
            let v = self.get(i);
            if !(v >= *lo && v <= *hi) {
                return Err(Error::Input(format!(
                    "toy parameter {name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Maps an unconstrained latent to parameters via `lo + (hi - lo) sigmoid(z)`.
    pub fn from_latent(z: &[f64]) -> Result<Self> {
        if z.len() != PARAM_DIM {
            return Err(Error::Input(format!(
                "toy latent must have length {PARAM_DIM}, got {}",
                z.len()
            )));
        }
        let v: Vec<f64> = z
            .iter()
            .zip(PARAM_BOUNDS)
            .map(|(&zi, (_, lo, hi))| lo + (hi - lo) * sigmoid(zi))
            .collect();
        Self::from_vec(&v)
    }

    /// Inverse of [`ToyFaceParams::from_latent`]; boundary values map to ±∞
    /// and are clamped to ±30.
    pub fn to_latent(&self) -> Vec<f64> {
        PARAM_BOUNDS
            .iter()
            .enumerate()
            .map(|(i, (_, lo, hi))| {
                let u = (self.get(i) - lo) / (hi - lo);
                (u / (1.0 - u)).ln().clamp(-30.0, 30.0)
            })
            .collect()
    }

    pub fn labels(&self) -> ToyLabels {
        ToyLabels {
            smiling: self.get(SMILE) > SMILE_THRESHOLD,
            wearing_hat: self.get(HAT) > HAT_THRESHOLD,
        }
    }
}

/// `d params / d latent` for the sigmoid squashing.
pub fn latent_jacobian_diag(z: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(PARAM_BOUNDS)
        .map(|(&zi, (_, lo, hi))| {
            let s = sigmoid(zi);
            (hi - lo) * s * (1.0 - s)
        })
        .collect()
}

/// Value with its gradient w.r.t. the twelve face parameters.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    g: [f64; PARAM_DIM],
}

impl Dual {
    fn constant(v: f64) -> Self {
        Dual { v, g: [0.0; PARAM_DIM] }
    }

    fn param(p: &ToyFaceParams, i: usize) -> Self {
        let mut g = [0.0; PARAM_DIM];
        g[i] = 1.0;
        Dual { v: p.get(i), g }
    }

    /// `a·self + b·other + c`.
    fn lin(self, a: f64, other: Dual, b: f64, c: f64) -> Dual {
        let mut g = [0.0; PARAM_DIM];
        for i in 0..PARAM_DIM {
            g[i] = a * self.g[i] + b * other.g[i];
        }
        Dual { v: a * self.v + b * other.v + c, g }
    }

    fn affine(self, a: f64, c: f64) -> Dual {
        self.lin(a, Dual::constant(0.0), 0.0, c)
    }
}

// Quantity slots shared by the mask layers.
const Q_CX: usize = 0;
const Q_CY: usize = 1;
const Q_A: usize = 2;
const Q_B: usize = 3;
const Q_FX: usize = 4;
const Q_EY: usize = 5;
const Q_ELX: usize = 6;
const Q_ERX: usize = 7;
const Q_BROW_Y: usize = 8;
const Q_NOSE_Y: usize = 9;
const Q_MOUTH_Y: usize = 10;
const Q_SMILE_K: usize = 11;
const Q_HAT: usize = 12;
const Q_SKIN: usize = 13; // 3 slots
const Q_NOSE_COL: usize = 16; // 3 slots
const Q_BG: usize = 19; // 3 slots
const Q_BRIGHT: usize = 22;
const Q_CONST_START: usize = 23;

const FACE_CY: f64 = 118.0;
const YAW_SHIFT: f64 = 20.0;
const FEATURE_PARALLAX: f64 = 6.0;
const BROW_OFFSET: f64 = 13.0;
const MOUTH_HALF_WIDTH: f64 = 24.0;
const SMILE_DEPTH: f64 = 10.0;
const SKIN_LIGHT: [f64; 3] = [0.98, 0.82, 0.70];
const SKIN_DARK: [f64; 3] = [0.45, 0.30, 0.20];
const BROW_COL: [f64; 3] = [0.25, 0.15, 0.10];
const EYE_COL: [f64; 3] = [0.10, 0.10, 0.15];
const LIP_COL: [f64; 3] = [0.65, 0.15, 0.20];
const HAT_COL: [f64; 3] = [0.15, 0.20, 0.50];
const NOSE_SHADE: f64 = 0.72;

#[derive(Clone, Copy, Debug)]
enum Shape {
    /// `sigmoid(sharp (1 - ((x-cx)/rx)^2 - ((y-cy)/ry)^2))`
    Ellipse {
        cx: usize,
        cy: usize,
        rx: usize,
        ry: usize,
        sharp: f64,
    },
    /// Gaussian band around a parabola, windowed to the mouth width.
    Mouth,
    /// Strength times a soft region above the forehead.
    Hat,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    shape: Shape,
    color: [usize; 3],
}

const MOUTH_BAND: f64 = 2.5;
const MOUTH_WINDOW: f64 = 8.0;
const HAT_EDGE: f64 = 1.5;
const HAT_SIDE: f64 = 0.01;
const HAT_WIDTH: f64 = 1.15;
const HAT_LINE: f64 = 0.5;

/// Geometry of one face: quantity values with parameter gradients.
struct Scene {
    q: Vec<Dual>,
    layers: Vec<Layer>,
}

impl Scene {
    fn new(p: &ToyFaceParams) -> Scene {
        let a = Dual::param(p, 0);
        let b = Dual::param(p, 1);
        let e = Dual::param(p, 2);
        let eh = Dual::param(p, 3);
        let tone = Dual::param(p, 4);
        let yaw = Dual::param(p, YAW);
        let smile = Dual::param(p, SMILE);

        let cx = yaw.affine(YAW_SHIFT, CROP_SIZE as f64 / 2.0);
        let cy = Dual::constant(FACE_CY);
        let fx = yaw.affine(YAW_SHIFT + FEATURE_PARALLAX, CROP_SIZE as f64 / 2.0);
        let ey = eh.affine(1.0, FACE_CY);
        let elx = fx.lin(1.0, e, -1.0, 0.0);
        let erx = fx.lin(1.0, e, 1.0, 0.0);
        let brow_y = ey.affine(1.0, -BROW_OFFSET);
        let mouth_y = b.affine(0.5, FACE_CY);
        let nose_y = ey.lin(0.45, mouth_y, 0.55, 0.0);
        let smile_k = smile.affine(SMILE_DEPTH, 0.0);
        let hat = Dual::param(p, HAT);

        let mut q = vec![
            cx, cy, a, b, fx, ey, elx, erx, brow_y, nose_y, mouth_y, smile_k, hat,
        ];
        for c in 0..3 {
            q.push(tone.affine(SKIN_DARK[c] - SKIN_LIGHT[c], SKIN_LIGHT[c]));
        }
        for c in 0..3 {
            q.push(tone.affine(NOSE_SHADE * (SKIN_DARK[c] - SKIN_LIGHT[c]), NOSE_SHADE * SKIN_LIGHT[c]));
        }
        for c in BACKGROUND {
            q.push(Dual::param(p, c));
        }
        q.push(Dual::param(p, BRIGHTNESS));
        debug_assert_eq!(q.len(), Q_CONST_START);

        let mut constant = |v: f64| {
            q.push(Dual::constant(v));
            q.len() - 1
        };
        let brow_col = BROW_COL.map(&mut constant);
        let eye_col = EYE_COL.map(&mut constant);
        let lip_col = LIP_COL.map(&mut constant);
        let hat_col = HAT_COL.map(&mut constant);
        let brow_rx = constant(11.0);
        let brow_ry = constant(2.5);
        let eye_rx = constant(8.0);
        let eye_ry = constant(4.0);
        let nose_rx = constant(6.0);
        let nose_ry = constant(5.0);
        let skin = [Q_SKIN, Q_SKIN + 1, Q_SKIN + 2];

        let ellipse = |cx, cy, rx, ry, sharp| Shape::Ellipse { cx, cy, rx, ry, sharp };
        let layers = vec![
            Layer { shape: ellipse(Q_CX, Q_CY, Q_A, Q_B, 12.0), color: skin },
            Layer { shape: ellipse(Q_ELX, Q_BROW_Y, brow_rx, brow_ry, 3.0), color: brow_col },
            Layer { shape: ellipse(Q_ERX, Q_BROW_Y, brow_rx, brow_ry, 3.0), color: brow_col },
            Layer { shape: ellipse(Q_ELX, Q_EY, eye_rx, eye_ry, 3.0), color: eye_col },
            Layer { shape: ellipse(Q_ERX, Q_EY, eye_rx, eye_ry, 3.0), color: eye_col },
            Layer {
                shape: ellipse(Q_FX, Q_NOSE_Y, nose_rx, nose_ry, 2.0),
                color: [Q_NOSE_COL, Q_NOSE_COL + 1, Q_NOSE_COL + 2],
            },
            Layer { shape: Shape::Mouth, color: lip_col },
            Layer { shape: Shape::Hat, color: hat_col },
        ];
        Scene { q, layers }
    }

    fn v(&self, slot: usize) -> f64 {
        self.q[slot].v
    }

    /// Mask value at `(x, y)`; when `grad` is `Some((gm, adj))`, also adds
    /// `gm · ∂mask/∂q` into the adjoint buffer.
    fn mask(&self, shape: &Shape, x: f64, y: f64, grad: Option<(f64, &mut [f64])>) -> f64 {
        match *shape {
            Shape::Ellipse { cx, cy, rx, ry, sharp } => {
                let (cxv, cyv, rxv, ryv) = (self.v(cx), self.v(cy), self.v(rx), self.v(ry));
                let dx = x - cxv;
                let dy = y - cyv;
                let qv = (dx / rxv).powi(2) + (dy / ryv).powi(2);
                let t = sharp * (1.0 - qv);
                if t < -SAT {
                    return 0.0;
                }
                let m = sigmoid(t);
                if let Some((gm, adj)) = grad {
                    // dm/dq = -sharp m (1 - m)
                    let gq = -gm * sharp * m * (1.0 - m);
                    adj[cx] += gq * (-2.0 * dx / (rxv * rxv));
                    adj[cy] += gq * (-2.0 * dy / (ryv * ryv));
                    adj[rx] += gq * (-2.0 * dx * dx / (rxv * rxv * rxv));
                    adj[ry] += gq * (-2.0 * dy * dy / (ryv * ryv * ryv));
                }
                m
            }
            Shape::Mouth => {
                let (fx, my, k) = (self.v(Q_FX), self.v(Q_MOUTH_Y), self.v(Q_SMILE_K));
                let u = (x - fx) / MOUTH_HALF_WIDTH;
                let wt = MOUTH_WINDOW * (1.0 - u * u);
                if wt < -SAT {
                    return 0.0;
                }
                let yc = my - k * u * u;
                let dy = y - yc;
                let e = dy * dy / (2.0 * MOUTH_BAND * MOUTH_BAND);
                if e > SAT {
                    return 0.0;
                }
                let band = (-e).exp();
                let win = sigmoid(wt);
                let m = band * win;
                if let Some((gm, adj)) = grad {
                    let dband_dyc = band * dy / (MOUTH_BAND * MOUTH_BAND);
                    let dwin_du = win * (1.0 - win) * MOUTH_WINDOW * (-2.0 * u);
                    let dyc_du = -2.0 * k * u;
                    let dm_du = dband_dyc * dyc_du * win + band * dwin_du;
                    adj[Q_FX] += gm * dm_du * (-1.0 / MOUTH_HALF_WIDTH);
                    adj[Q_MOUTH_Y] += gm * dband_dyc * win;
                    adj[Q_SMILE_K] += gm * dband_dyc * win * (-u * u);
                }
                m
            }
            Shape::Hat => {
                let (cx, cy, a, b, h) = (
                    self.v(Q_CX),
                    self.v(Q_CY),
                    self.v(Q_A),
                    self.v(Q_B),
                    self.v(Q_HAT),
                );
                let top = cy - HAT_LINE * b;
                let v1 = (top - y) / HAT_EDGE;
                let half = HAT_WIDTH * a;
                let dx = x - cx;
                let v2 = HAT_SIDE * (half * half - dx * dx);
                if v1 < -SAT || v2 < -SAT {
                    return 0.0;
                }
                let s1 = sigmoid(v1);
                let s2 = sigmoid(v2);
                let m = h * s1 * s2;
                if let Some((gm, adj)) = grad {
                    let ds1 = s1 * (1.0 - s1);
                    let ds2 = s2 * (1.0 - s2);
                    adj[Q_HAT] += gm * s1 * s2;
                    adj[Q_CY] += gm * h * s2 * ds1 / HAT_EDGE;
                    adj[Q_B] += gm * h * s2 * ds1 * (-HAT_LINE / HAT_EDGE);
                    adj[Q_A] += gm * h * s1 * ds2 * HAT_SIDE * 2.0 * half * HAT_WIDTH;
                    adj[Q_CX] += gm * h * s1 * ds2 * HAT_SIDE * 2.0 * dx;
                }
                m
            }
        }
    }

    fn color(&self, layer: &Layer) -> [f64; 3] {
        layer.color.map(|s| self.v(s))
    }

    fn pixel(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = [Q_BG, Q_BG + 1, Q_BG + 2].map(|s| self.v(s));
        for layer in &self.layers {
            let m = self.mask(&layer.shape, x, y, None);
            if m == 0.0 {
                continue;
            }
            let col = self.color(layer);
            for ch in 0..3 {
                c[ch] += m * (col[ch] - c[ch]);
            }
        }
        let bright = self.v(Q_BRIGHT);
        c.map(|v| bright * v)
    }

    /// Accumulates `gp · d pixel(x, y) / d q` into `adj`.
    fn pixel_backward(&self, x: f64, y: f64, gp: [f64; 3], adj: &mut [f64], scratch: &mut Vec<(f64, [f64; 3])>) {
        scratch.clear();
        let mut c = [Q_BG, Q_BG + 1, Q_BG + 2].map(|s| self.v(s));
        for layer in &self.layers {
            let m = self.mask(&layer.shape, x, y, None);
            scratch.push((m, c));
            if m == 0.0 {
                continue;
            }
            let col = self.color(layer);
            for ch in 0..3 {
                c[ch] += m * (col[ch] - c[ch]);
            }
        }
        let bright = self.v(Q_BRIGHT);
        adj[Q_BRIGHT] += gp[0] * c[0] + gp[1] * c[1] + gp[2] * c[2];
        let mut gc = gp.map(|g| g * bright);
        for (layer, &(m, before)) in self.layers.iter().zip(scratch.iter()).rev() {
            if m == 0.0 {
                continue;
            }
            let col = self.color(layer);
            let mut gm = 0.0;
            for ch in 0..3 {
                gm += gc[ch] * (col[ch] - before[ch]);
                adj[layer.color[ch]] += gc[ch] * m;
                gc[ch] *= 1.0 - m;
            }
            if gm != 0.0 {
                self.mask(&layer.shape, x, y, Some((gm, adj)));
            }
        }
        for ch in 0..3 {
            adj[Q_BG + ch] += gc[ch];
        }
    }

    fn landmarks(&self) -> Vec<[f64; 2]> {
        let v = |s| self.v(s);
        let (cx, cy, a, b) = (v(Q_CX), v(Q_CY), v(Q_A), v(Q_B));
        let (fx, ey, elx, erx) = (v(Q_FX), v(Q_EY), v(Q_ELX), v(Q_ERX));
        let (brow_y, nose_y, my, k) = (v(Q_BROW_Y), v(Q_NOSE_Y), v(Q_MOUTH_Y), v(Q_SMILE_K));
        let mut pts = Vec::with_capacity(LANDMARK_COUNT);
        // jaw 0-16
        for i in 0..17 {
            let th = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
            pts.push([cx + a * th.cos(), cy + b * th.sin()]);
        }
        // brows 17-26
        for ex in [elx, erx] {
            for t in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                pts.push([ex + 11.0 * t, brow_y - 2.5 * (1.0 - t * t)]);
            }
        }
        // nose bridge 27-30, base 31-35
        for j in 0..4 {
            pts.push([fx, ey + (nose_y - ey) * j as f64 / 3.0]);
        }
        for t in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            pts.push([fx + 6.0 * t, nose_y + 3.0]);
        }
        // eyes 36-47
        for ex in [elx, erx] {
            for (dx, dy) in [(-8.0, 0.0), (-3.0, -4.0), (3.0, -4.0), (8.0, 0.0), (3.0, 4.0), (-3.0, 4.0)] {
                pts.push([ex + dx, ey + dy]);
            }
        }
        // mouth 48-67
        let curve = |t: f64| my - k * t * t;
        let w = MOUTH_HALF_WIDTH;
        pts.push([fx - w, curve(-1.0)]);
        for t in [-2.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0] {
            pts.push([fx + w * t, curve(t) - 4.0]);
        }
        pts.push([fx + w, curve(1.0)]);
        for t in [2.0 / 3.0, 1.0 / 3.0, 0.0, -1.0 / 3.0, -2.0 / 3.0] {
            pts.push([fx + w * t, curve(t) + 5.0]);
        }
        pts.push([fx - 0.8 * w, curve(-0.8)]);
        for t in [-1.0 / 3.0, 0.0, 1.0 / 3.0] {
            pts.push([fx + w * t, curve(t) - 1.5]);
        }
        pts.push([fx + 0.8 * w, curve(0.8)]);
        for t in [1.0 / 3.0, 0.0, -1.0 / 3.0] {
            pts.push([fx + w * t, curve(t) + 1.5]);
        }
        pts
    }
}

const SAT: f64 = 40.0;

fn pixel_center(i: usize) -> f64 {
    i as f64 + 0.5
}

/// Renders the face, its exact 68 landmarks and its binary labels.
pub fn render_toy_face(p: &ToyFaceParams) -> Result<(ImageTensor, LandmarkSet, ToyLabels)> {
    p.validate()?;
    let image = render_unchecked(p);
    Ok((image, landmarks_of(p)?, p.labels()))
}

pub(crate) fn render_unchecked(p: &ToyFaceParams) -> ImageTensor {
    let scene = Scene::new(p);
    let mut pixels = Vec::with_capacity(CROP_SIZE * CROP_SIZE * 3);
    for iy in 0..CROP_SIZE {
        for ix in 0..CROP_SIZE {
            let c = scene.pixel(pixel_center(ix), pixel_center(iy));
            pixels.extend(c.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    ImageTensor::new(CROP_SIZE, CROP_SIZE, RangeTag::Unit, pixels)
        .expect("renderer output is a valid unit-range crop")
}

/// Gradient of `Σ cotangent · image` w.r.t. the twelve parameters.
pub fn render_vjp(p: &ToyFaceParams, cotangent: &[f64]) -> Result<Vec<f64>> {
    if cotangent.len() != CROP_SIZE * CROP_SIZE * 3 {
        return Err(Error::Input(format!(
            "pixel cotangent must have length {}, got {}",
            CROP_SIZE * CROP_SIZE * 3,
            cotangent.len()
        )));
    }
    let scene = Scene::new(p);
    let mut adj = vec![0.0; scene.q.len()];
    let mut scratch = Vec::with_capacity(scene.layers.len());
    for iy in 0..CROP_SIZE {
        for ix in 0..CROP_SIZE {
            let base = (iy * CROP_SIZE + ix) * 3;
            let gp = [cotangent[base], cotangent[base + 1], cotangent[base + 2]];
            if gp == [0.0; 3] {
                continue;
            }
            scene.pixel_backward(pixel_center(ix), pixel_center(iy), gp, &mut adj, &mut scratch);
        }
    }
    let mut grad = vec![0.0; PARAM_DIM];
    for (a, q) in adj.iter().zip(&scene.q) {
        if *a == 0.0 {
            continue;
        }
        for i in 0..PARAM_DIM {
            grad[i] += a * q.g[i];
        }
    }
    Ok(grad)
}

pub fn landmarks_of(p: &ToyFaceParams) -> Result<LandmarkSet> {
    LandmarkSet::new(Scene::new(p).landmarks())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mid_params() -> ToyFaceParams {
        ToyFaceParams::from_latent(&[0.0; PARAM_DIM]).unwrap()
    }

    #[test]
    fn latent_round_trip() {
        let z = [0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 1.5, -2.2, 0.0, 0.7, -0.9, 0.4];
        let back = ToyFaceParams::from_latent(&z).unwrap().to_latent();
        for (a, b) in z.iter().zip(back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_bounds_params_rejected() {
        let mut p = mid_params();
        p.set(HAT, 1.5);
        assert!(matches!(render_toy_face(&p), Err(Error::Input(_))));
        assert!(ToyFaceParams::from_vec(&[0.0; 3]).is_err());
    }

    #[test]
    fn labels_follow_threshold_rules() {
        let mut p = mid_params();
        p.set(HAT, 0.0);
        p.set(SMILE, 0.4);
        let (_, _, labels) = render_toy_face(&p).unwrap();
        assert!(!labels.wearing_hat);
        assert!(labels.smiling);
        p.set(SMILE, -0.4);
        p.set(HAT, 0.9);
        assert_eq!(p.labels(), ToyLabels { smiling: false, wearing_hat: true });
    }

    #[test]
    fn landmarks_ignore_background_brightness_and_hat() {
        let p = mid_params();
        let mut q = p.clone();
        for (i, v) in [(BACKGROUND[0], 0.9), (BACKGROUND[2], 0.05), (BRIGHTNESS, 0.61), (HAT, 0.95)] {
            q.set(i, v);
        }
        assert_eq!(landmarks_of(&p).unwrap(), landmarks_of(&q).unwrap());
    }

    #[test]
    fn labels_ignore_identity_part() {
        let p = mid_params();
        let mut q = p.clone();
        q.id_part = [51.0, 87.0, 29.0, -15.0, 0.9];
        assert_eq!(p.labels(), q.labels());
    }

    #[test]
    fn smile_moves_mouth_corners() {
        let mut p = mid_params();
        p.set(SMILE, 1.0);
        let up = landmarks_of(&p).unwrap();
        p.set(SMILE, -1.0);
        let down = landmarks_of(&p).unwrap();
        // corners 48 and 54 rise (smaller y) when smiling
        assert!(up.points()[48][1] < down.points()[48][1] - 10.0);
        assert!(up.points()[54][1] < down.points()[54][1] - 10.0);
    }

    #[test]
    fn red_background_dominates_border() {
        let mut p = mid_params();
        p.nonid_part[BACKGROUND[0] - ID_DIM] = 1.0;
        p.nonid_part[BACKGROUND[1] - ID_DIM] = 0.0;
        p.nonid_part[BACKGROUND[2] - ID_DIM] = 0.0;
        p.set(HAT, 0.0);
        let (img, _, _) = render_toy_face(&p).unwrap();
        for i in 0..CROP_SIZE {
            for (y, x) in [(CROP_SIZE - 1, i), (i, 0), (i, CROP_SIZE - 1)] {
                let (r, g, b) = (img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
                assert!(r > g && r > b, "border pixel ({y},{x}) not red-dominant");
            }
        }
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let p = mid_params();
        let (a, _, _) = render_toy_face(&p).unwrap();
        let (b, _, _) = render_toy_face(&p).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let z = [0.4, -0.3, 0.2, -0.6, 0.5, 0.35, 0.6, 0.1, -0.2, 0.3, 0.8, -0.1];
        let p = ToyFaceParams::from_latent(&z).unwrap();
        let n = CROP_SIZE * CROP_SIZE * 3;
        let w: Vec<f64> = (0..n).map(|i| (((i * 2654435761) % 1000) as f64 / 1000.0) - 0.5).collect();
        let objective = |p: &ToyFaceParams| -> f64 {
            render_unchecked(p).pixels().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let g = render_vjp(&p, &w).unwrap();
        for i in 0..PARAM_DIM {
            let (_, lo, hi) = PARAM_BOUNDS[i];
            let h = 1e-5 * (hi - lo);
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.set(i, p.get(i) + h);
            pm.set(i, p.get(i) - h);
            let num = (objective(&pp) - objective(&pm)) / (2.0 * h);
            let tol = 1e-5 * num.abs().max(1.0);
            assert!((num - g[i]).abs() < tol, "param {i}: analytic {} vs numeric {num}", g[i]);
        }
    }
}
