//! Pixel heatmaps of what each glimpse attends to, and of what the
//! reduction step suppresses.
//!
//! Both maps are the per-pixel ℓ¹ norm (over colour channels) of the input
//! gradient of a weighted sum `Σ w_i f_i` with constant weights `w`. For
//! attention influence `f = a` and `w = a` by default, which makes the
//! objective the gradient of `½‖a‖²`. For suppression `f` ranges over the
//! entries of `X̄^k` in the most suppressed channels and `w` holds their
//! decrements in `X̄^{k+1}`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rra_tensor::{Graph, Mode, Tensor, Var};

use crate::data::{pack_frames, Frame};
use crate::error::{io_err, Error, Result};
use crate::model::{Forward, RraModel};

/// A single-channel map over one frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PixelMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        PixelMap {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// `½‖a‖²`
pub fn attention_energy(a: &[f64]) -> f64 {
    0.5 * a.iter().map(|x| x * x).sum::<f64>()
}

struct PixelPass {
    g: Graph,
    input: Var,
    out: Forward,
}

fn forward_from_pixels(model: &mut RraModel, frames: &[Frame]) -> Result<PixelPass> {
    let mut g = Graph::new();
    let vars = model.store.bind(&mut g);
    let input = g.input(pack_frames(&[frames.to_vec()])?, true);
    let mut no_rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&mut g, &vars, input, 1, Mode::Eval, false, &mut no_rng)?;
    Ok(PixelPass { g, input, out })
}

/// Backpropagates `Σ w ⊙ f` to the pixels and reduces over colour channels.
fn pixel_l1(mut pass: PixelPass, f: Var, w: Tensor) -> Result<Vec<PixelMap>> {
    let g = &mut pass.g;
    let weighted = g.mul_const(f, w)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;
    let shape = g.shape(pass.input).to_vec();
    let (c, n, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut maps = vec![PixelMap::zeros(h, w); n];
    if let Some(grad) = grads.get(pass.input) {
        if !grad.is_finite() {
            return Err(Error::Data("non-finite pixel gradient".into()));
        }
        for ch in 0..c {
            for (fi, map) in maps.iter_mut().enumerate() {
                let plane = &grad.data()[(ch * n + fi) * h * w..(ch * n + fi + 1) * h * w];
                for (o, v) in map.data.iter_mut().zip(plane) {
                    *o += v.abs();
                }
            }
        }
    }
    Ok(maps)
}

fn check_glimpse(model: &RraModel, k: usize) -> Result<()> {
    if k >= model.config().glimpses {
        return Err(Error::Config(format!(
            "glimpse {k} out of range for a {}-glimpse model",
            model.config().glimpses
        )));
    }
    Ok(())
}

/// Influence of every pixel on glimpse `k`'s attention, one map per frame
/// of `frames` (a single video). `weights` defaults to the attention itself.
pub fn influence_map(model: &mut RraModel, frames: &[Frame], k: usize, weights: Option<&[f64]>) -> Result<Vec<PixelMap>> {
    check_glimpse(model, k)?;
    let pass = forward_from_pixels(model, frames)?;
    let a = pass.out.glimpses[k].a;
    let w = match weights {
        Some(w) if w.len() != pass.g.value(a).len() => {
            return Err(Error::Config(format!(
                "{} influence weights for {} positions",
                w.len(),
                pass.g.value(a).len()
            )))
        }
        Some(w) => Tensor::new(pass.g.shape(a), w.to_vec())?,
        None => pass.g.value(a).clone(),
    };
    pixel_l1(pass, a, w)
}

/// Indices of the `top_m` smallest entries, smallest first; ties go to the
/// lower index.
pub fn most_suppressed(xtilde: &[f64], top_m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xtilde.len()).collect();
    idx.sort_by(|&i, &j| xtilde[i].total_cmp(&xtilde[j]).then(i.cmp(&j)));
    idx.truncate(top_m);
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuppressionMap {
    /// Selected channels, most suppressed first.
    pub channels: Vec<usize>,
    /// `x̃^k` for the visualized video.
    pub xtilde: Vec<f64>,
    pub maps: Vec<PixelMap>,
}

/// Decrement-weighted pixel influence for the `top_m` most suppressed
/// channels of reduction step `k`. Each entry of those channels is weighted
/// by how much it fell from `X̄^k` to `X̄^{k+1}`; entries that did not fall
/// contribute nothing.
pub fn suppression_map(model: &mut RraModel, frames: &[Frame], k: usize, top_m: usize) -> Result<SuppressionMap> {
    check_glimpse(model, k)?;
    let c = model.rra.config().channels;
    if top_m == 0 || top_m > c {
        return Err(Error::Config(format!("top_m {top_m} must lie in 1..={c}")));
    }
    let pass = forward_from_pixels(model, frames)?;
    let st = pass.out.glimpses[k];
    let (Some(xtilde), Some(next)) = (st.xtilde, st.xbar_next) else {
        return Err(Error::Config(format!("glimpse {k} has no reduction step")));
    };
    let xtilde = pass.g.value(xtilde).data().to_vec();
    let channels = most_suppressed(&xtilde, top_m);
    let (cur, next) = (pass.g.value(st.xbar), pass.g.value(next));
    let m = cur.shape()[1];
    let mut w = vec![0.0; c * m];
    for &j in &channels {
        for i in j * m..(j + 1) * m {
            w[i] = (cur.data()[i] - next.data()[i]).max(0.0);
        }
    }
    let maps = pixel_l1(pass, st.xbar, Tensor::new(&[c, m], w)?)?;
    Ok(SuppressionMap { channels, xtilde, maps })
}

/// Normalized Gaussian taps at offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Weighted average of the in-range neighbours of each sample; the kernel
/// is renormalized where it hangs over the border.
fn blur_line(src: &[f64], dst: &mut [f64], kernel: &[f64]) {
    let r = (kernel.len() / 2) as i64;
    let n = src.len() as i64;
    for (i, out) in dst.iter_mut().enumerate() {
        let i = i as i64;
        let (lo, hi) = ((i - r).max(0), (i + r).min(n - 1));
        let (mut acc, mut kept) = (0.0, 0.0);
        for j in lo..=hi {
            let k = kernel[(j - i + r) as usize];
            acc += k * src[j as usize];
            kept += k;
        }
        *out = acc / kept;
    }
}

pub fn gaussian_blur(map: &PixelMap, sigma: f64) -> PixelMap {
    if sigma <= 0.0 {
        return map.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let (h, w) = (map.height, map.width);
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        blur_line(&map.data[y * w..(y + 1) * w], &mut rows[y * w..(y + 1) * w], &kernel);
    }
    let mut out = vec![0.0; h * w];
    let (mut col, mut blurred) = (vec![0.0; h], vec![0.0; h]);
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        blur_line(&col, &mut blurred, &kernel);
        for y in 0..h {
            out[y * w + x] = blurred[y];
        }
    }
    PixelMap {
        height: h,
        width: w,
        data: out,
    }
}

/// Min-max scaling to `[0, 1]`. A map whose range is within rounding
/// noise of its magnitude counts as constant and becomes all zeros.
pub fn normalize(map: &PixelMap) -> PixelMap {
    let lo = map.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span.is_finite() && span > 1e-12 * lo.abs().max(hi.abs()) {
        map.data.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; map.data.len()]
    };
    PixelMap { data, ..*map }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Colormap {
    #[default]
    Jet,
    Gray,
    Hot,
}

impl Colormap {
    pub fn name(self) -> &'static str {
        match self {
            Colormap::Jet => "jet",
            Colormap::Gray => "gray",
            Colormap::Hot => "hot",
        }
    }

    /// RGB in `[0, 1]` for `v` in `[0, 1]`.
    pub fn color(self, v: f64) -> [f64; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Gray => [v, v, v],
            Colormap::Hot => [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)],
            Colormap::Jet => {
                let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
                [ramp(3.0), ramp(2.0), ramp(1.0)]
            }
        }
    }
}

impl fmt::Display for Colormap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Colormap::Jet, Colormap::Gray, Colormap::Hot]
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown colormap {s:?} (jet, gray, hot)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSpec {
    pub sigma: f64,
    pub colormap: Colormap,
    /// Heatmap opacity over the base frame; 1 hides the frame.
    pub alpha: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            sigma: 2.0,
            colormap: Colormap::Jet,
            alpha: 0.6,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be a non-negative number", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("overlay alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Blurred and normalized intensities, before colouring.
pub fn intensities(map: &PixelMap, sigma: f64) -> PixelMap {
    normalize(&gaussian_blur(map, sigma))
}

fn base_rgb(frame: &Frame, y: usize, x: usize) -> [f64; 3] {
    let ch = |c: usize| f64::from(frame.get(c.min(frame.channels - 1), y, x)).clamp(0.0, 1.0);
    [ch(0), ch(1), ch(2)]
}

pub fn render(map: &PixelMap, spec: &RenderSpec, base: Option<&Frame>) -> Result<RgbImage> {
    spec.validate()?;
    if map.data.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Data("heatmaps must be non-negative and finite".into()));
    }
    if let Some(f) = base {
        if f.height != map.height || f.width != map.width || f.channels == 0 {
            return Err(Error::Data(format!(
                "base frame {}x{} does not match map {}x{}",
                f.height, f.width, map.height, map.width
            )));
        }
    }
    let level = intensities(map, spec.sigma);
    let mut img = RgbImage::new(map.width as u32, map.height as u32);
    for y in 0..map.height {
        for x in 0..map.width {
            let heat = spec.colormap.color(level.get(y, x));
            let px = match base {
                Some(f) => {
                    let b = base_rgb(f, y, x);
                    [0, 1, 2].map(|c| spec.alpha * heat[c] + (1.0 - spec.alpha) * b[c])
                }
                None => heat,
            };
            img.put_pixel(x as u32, y as u32, Rgb(px.map(|v| (v * 255.0).round() as u8)));
        }
    }
    Ok(img)
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// `{video}_g{k}_{target}-f{frame}.png`
pub fn heatmap_filename(video_id: &str, k: usize, target: &str, frame: usize) -> String {
    format!("{video_id}_g{k}_{target}-f{frame}.png")
}
