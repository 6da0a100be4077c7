//! Multi-scale corner cropping, horizontal flips, and the deterministic
//! test-time crop set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rra_tensor::Mode;

use super::Frame;
use crate::error::{Error, Result};

/// Crop scales relative to the short side of the frame.
pub const MULTI_SCALES: [f64; 4] = [1.0, 0.875, 0.75, 0.66];

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Side length of the square model input.
    pub input_size: usize,
    /// Training crop scales; an empty list disables multi-scale cropping
    /// (train crops are then centered at `input_size`).
    pub scales: Vec<f64>,
    /// Whether training randomly flips frames.
    pub train_flip: bool,
    pub test_crops: usize,
    pub test_flip: bool,
}

impl AugmentSpec {
    pub fn new(input_size: usize) -> Self {
        AugmentSpec {
            input_size,
            scales: MULTI_SCALES.to_vec(),
            train_flip: true,
            test_crops: 1,
            test_flip: false,
        }
    }

    pub fn variants_per_frame(&self) -> usize {
        self.test_crops * if self.test_flip { 2 } else { 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl CropPosition {
    pub const ALL: [CropPosition; 5] = [
        CropPosition::TopLeft,
        CropPosition::TopRight,
        CropPosition::BottomLeft,
        CropPosition::BottomRight,
        CropPosition::Center,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl CropWindow {
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.size >= 1 && self.x + self.size <= width && self.y + self.size <= height
    }
}

pub fn crop_window(height: usize, width: usize, size: usize, pos: CropPosition) -> CropWindow {
    let (dx, dy) = (width - size, height - size);
    let (x, y) = match pos {
        CropPosition::TopLeft => (0, 0),
        CropPosition::TopRight => (dx, 0),
        CropPosition::BottomLeft => (0, dy),
        CropPosition::BottomRight => (dx, dy),
        CropPosition::Center => (dx / 2, dy / 2),
    };
    CropWindow { x, y, size }
}

pub fn flip_horizontal(frame: &Frame) -> Frame {
    let mut out = frame.clone();
    for c in 0..frame.channels {
        for y in 0..frame.height {
            let row = (c * frame.height + y) * frame.width;
            out.data[row..row + frame.width].reverse();
        }
    }
    out
}

pub fn crop(frame: &Frame, win: CropWindow) -> Frame {
    debug_assert!(win.fits(frame.height, frame.width));
    let mut out = Frame::zeros(frame.channels, win.size, win.size);
    for c in 0..frame.channels {
        for y in 0..win.size {
            let src = frame.index(c, win.y + y, win.x);
            let dst = out.index(c, y, 0);
            out.data[dst..dst + win.size].copy_from_slice(&frame.data[src..src + win.size]);
        }
    }
    out
}

/// Bilinear resize to `size × size` with half-pixel centers. Same-size
/// input is returned unchanged.
pub fn resize_bilinear(frame: &Frame, size: usize) -> Frame {
    if frame.height == size && frame.width == size {
        return frame.clone();
    }
    let mut out = Frame::zeros(frame.channels, size, size);
    let sy = frame.height as f64 / size as f64;
    let sx = frame.width as f64 / size as f64;
    let coord = |o: usize, scale: f64, len: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, (src - lo as f64) as f32)
    };
    for y in 0..size {
        let (y0, y1, fy) = coord(y, sy, frame.height);
        for x in 0..size {
            let (x0, x1, fx) = coord(x, sx, frame.width);
            for c in 0..frame.channels {
                let top = frame.get(c, y0, x0) * (1.0 - fx) + frame.get(c, y0, x1) * fx;
                let bot = frame.get(c, y1, x0) * (1.0 - fx) + frame.get(c, y1, x1) * fx;
                let i = out.index(c, y, x);
                out.data[i] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Random training crop: scale of the short side, corner-or-center
/// position, and a fair coin for the horizontal flip.
pub fn train_window<R: Rng + ?Sized>(height: usize, width: usize, spec: &AugmentSpec, rng: &mut R) -> (CropWindow, bool) {
    let short = height.min(width);
    let (size, pos) = if spec.scales.is_empty() {
        (spec.input_size.min(short), CropPosition::Center)
    } else {
        let scale = spec.scales[rng.random_range(0..spec.scales.len())];
        let size = ((scale * short as f64).round() as usize).clamp(1, short);
        (size, CropPosition::ALL[rng.random_range(0..5)])
    };
    let flip = spec.train_flip && rng.random_bool(0.5);
    (crop_window(height, width, size, pos), flip)
}

/// Train mode yields one randomly cropped, flipped, and resized frame.
/// Test mode yields the deterministic crop set: `test_crops` windows
/// (center, or four corners plus center) of side `input_size`, each
/// followed by its mirror image when `test_flip` is set.
pub fn augment(frame: &Frame, spec: &AugmentSpec, mode: Mode, seed: u64) -> Result<Vec<Frame>> {
    if frame.height.min(frame.width) < spec.input_size || spec.input_size == 0 {
        return Err(Error::Data(format!(
            "frame {}x{} smaller than crop {}",
            frame.height, frame.width, spec.input_size
        )));
    }
    match mode {
        Mode::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (win, flip) = train_window(frame.height, frame.width, spec, &mut rng);
            let mut out = resize_bilinear(&crop(frame, win), spec.input_size);
            if flip {
                out = flip_horizontal(&out);
            }
            Ok(vec![out])
        }
        Mode::Eval => {
            let positions: &[CropPosition] = match spec.test_crops {
                1 => &[CropPosition::Center],
                5 => &CropPosition::ALL,
                n => return Err(Error::Config(format!("test_crops must be 1 or 5, got {n}"))),
            };
            let mut out = Vec::with_capacity(spec.variants_per_frame());
            for &pos in positions {
                let c = crop(frame, crop_window(frame.height, frame.width, spec.input_size, pos));
                if spec.test_flip {
                    let f = flip_horizontal(&c);
                    out.push(c);
                    out.push(f);
                } else {
                    out.push(c);
                }
            }
            Ok(out)
        }
    }
}
