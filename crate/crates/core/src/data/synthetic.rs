//! Synthetic frame sequences in which a class-specific pattern appears in
//! only a fraction of the frames, surrounded by class-independent
//! distractor patterns and Gaussian noise.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Frame, VideoSample};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::seeds::rng_for;

/// Number of distinct distractor templates shared by all classes.
pub const DISTRACTOR_POOL: usize = 8;

const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub frames_per_video: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of frames carrying the class pattern, in `(0, 1]`.
    pub discriminative_fraction: f64,
    pub pattern_size: usize,
    pub distractor_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            train_per_class: 40,
            test_per_class: 20,
            frames_per_video: 16,
            channels: 3,
            height: 20,
            width: 20,
            discriminative_fraction: 0.25,
            pattern_size: 6,
            distractor_count: 2,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

pub const SPEC_KEYS: &[&str] = &[
    "num_classes",
    "train_per_class",
    "test_per_class",
    "frames_per_video",
    "channels",
    "frame_height",
    "frame_width",
    "discriminative_fraction",
    "pattern_size",
    "distractor_count",
    "noise_sigma",
    "data_seed",
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 || self.frames_per_video == 0 || self.channels == 0 {
            return cfg("classes, frames and channels must be positive");
        }
        if self.train_per_class + self.test_per_class == 0 {
            return cfg("dataset would be empty");
        }
        if !(self.discriminative_fraction > 0.0 && self.discriminative_fraction <= 1.0) {
            return cfg("discriminative_fraction must lie in (0, 1]");
        }
        if !(self.noise_sigma >= 0.0) {
            return cfg("noise_sigma must be non-negative");
        }
        if self.pattern_size == 0 || self.pattern_size > self.height || self.pattern_size > self.width {
            return Err(Error::Geometry(format!(
                "pattern {} does not fit in {}x{} frames",
                self.pattern_size, self.height, self.width
            )));
        }
        let slots = (self.height / self.pattern_size) * (self.width / self.pattern_size);
        if self.distractor_count + 1 > slots {
            return Err(Error::Geometry(format!(
                "{} patterns cannot be placed without overlap in {}x{} frames",
                self.distractor_count + 1,
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn discriminative_frames(&self) -> usize {
        ((self.discriminative_fraction * self.frames_per_video as f64).ceil() as usize).clamp(1, self.frames_per_video)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            train_per_class: kv.get_or("train_per_class", d.train_per_class)?,
            test_per_class: kv.get_or("test_per_class", d.test_per_class)?,
            frames_per_video: kv.get_or("frames_per_video", d.frames_per_video)?,
            channels: kv.get_or("channels", d.channels)?,
            height: kv.get_or("frame_height", d.height)?,
            width: kv.get_or("frame_width", d.width)?,
            discriminative_fraction: kv.get_or("discriminative_fraction", d.discriminative_fraction)?,
            pattern_size: kv.get_or("pattern_size", d.pattern_size)?,
            distractor_count: kv.get_or("distractor_count", d.distractor_count)?,
            noise_sigma: kv.get_or("noise_sigma", d.noise_sigma)?,
            seed: kv.get_or("data_seed", d.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("num_classes", self.num_classes);
        kv.set("train_per_class", self.train_per_class);
        kv.set("test_per_class", self.test_per_class);
        kv.set("frames_per_video", self.frames_per_video);
        kv.set("channels", self.channels);
        kv.set("frame_height", self.height);
        kv.set("frame_width", self.width);
        kv.set("discriminative_fraction", self.discriminative_fraction);
        kv.set("pattern_size", self.pattern_size);
        kv.set("distractor_count", self.distractor_count);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("data_seed", self.seed);
        kv
    }
}

/// A square multi-channel patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f32>,
}

impl Pattern {
    /// A solid colour in `[0.2, 1]` per channel over a random shape mask
    /// (each cell on with probability 3/4, the center always on).
    fn random<R: Rng>(channels: usize, size: usize, colour: &[f32], rng: &mut R) -> Self {
        let mask: Vec<bool> = (0..size * size)
            .map(|i| i == (size / 2) * size + size / 2 || rng.random_bool(0.75))
            .collect();
        let mut data = Vec::with_capacity(channels * size * size);
        for &c in colour.iter().take(channels) {
            data.extend(mask.iter().map(|&on| if on { c } else { 0.0 }));
        }
        Pattern { channels, size, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    fn stamp(&self, frame: &mut Frame, top: usize, left: usize) {
        for c in 0..self.channels {
            for y in 0..self.size {
                for x in 0..self.size {
                    let i = frame.index(c, top + y, left + x);
                    frame.data[i] = self.get(c, y, x);
                }
            }
        }
    }
}

/// Minimum Euclidean distance between template colours, when attainable.
const MIN_COLOUR_DISTANCE: f32 = 0.35;
const COLOUR_ATTEMPTS: usize = 1000;

/// Class templates followed by the distractor pool, drawn with mutually
/// distinct colours.
fn all_templates(spec: &SyntheticSpec) -> Vec<Pattern> {
    let mut rng = rng_for(spec.seed, &[&"templates"]);
    let mut colours: Vec<Vec<f32>> = Vec::new();
    let mut out = Vec::new();
    for _ in 0..spec.num_classes + DISTRACTOR_POOL {
        let mut colour = Vec::new();
        for _ in 0..COLOUR_ATTEMPTS {
            colour = (0..spec.channels).map(|_| rng.random_range(0.2f32..1.0)).collect();
            let far = colours.iter().all(|c| {
                c.iter().zip(&colour).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt() >= MIN_COLOUR_DISTANCE
            });
            if far {
                break;
            }
        }
        out.push(Pattern::random(spec.channels, spec.pattern_size, &colour, &mut rng));
        colours.push(colour);
    }
    out
}

/// The per-class templates, one per class.
pub fn class_templates(spec: &SyntheticSpec) -> Vec<Pattern> {
    let mut all = all_templates(spec);
    all.truncate(spec.num_classes);
    all
}

pub fn distractor_templates(spec: &SyntheticSpec) -> Vec<Pattern> {
    all_templates(spec).split_off(spec.num_classes)
}

/// Ground-truth placement of the class pattern, for inspection and tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Planted {
    pub frame: usize,
    pub top: usize,
    pub left: usize,
}

fn overlaps(a: (usize, usize), b: (usize, usize), size: usize) -> bool {
    a.0 < b.0 + size && b.0 < a.0 + size && a.1 < b.1 + size && b.1 < a.1 + size
}

fn place<R: Rng>(spec: &SyntheticSpec, taken: &[(usize, usize)], rng: &mut R) -> Result<(usize, usize)> {
    let p = spec.pattern_size;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let pos = (rng.random_range(0..=spec.height - p), rng.random_range(0..=spec.width - p));
        if taken.iter().all(|&t| !overlaps(t, pos, p)) {
            return Ok(pos);
        }
    }
    Err(Error::Geometry(format!(
        "could not place {} non-overlapping {p}px patterns in {}x{}",
        taken.len() + 1,
        spec.height,
        spec.width
    )))
}

fn generate_video(
    spec: &SyntheticSpec,
    split: &str,
    index: usize,
    label: usize,
    classes: &[Pattern],
    distractors: &[Pattern],
) -> Result<(VideoSample, Vec<Planted>)> {
    let mut rng = rng_for(spec.seed, &[&"video", &split, &index]);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0) as f32)
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let n_disc = spec.discriminative_frames();
    let chosen: Vec<usize> = sample(&mut rng, spec.frames_per_video, n_disc).into_vec();
    let mut frames = Vec::with_capacity(spec.frames_per_video);
    let mut planted = Vec::new();
    for fi in 0..spec.frames_per_video {
        let mut frame = Frame::zeros(spec.channels, spec.height, spec.width);
        let mut taken = Vec::new();
        if chosen.contains(&fi) {
            let pos = place(spec, &taken, &mut rng)?;
            classes[label].stamp(&mut frame, pos.0, pos.1);
            planted.push(Planted {
                frame: fi,
                top: pos.0,
                left: pos.1,
            });
            taken.push(pos);
        }
        for _ in 0..spec.distractor_count {
            let pos = place(spec, &taken, &mut rng)?;
            distractors[rng.random_range(0..distractors.len())].stamp(&mut frame, pos.0, pos.1);
            taken.push(pos);
        }
        if spec.noise_sigma > 0.0 {
            for v in &mut frame.data {
                *v += noise.sample(&mut rng);
            }
        }
        frames.push(frame);
    }
    planted.sort_by_key(|p| p.frame);
    let video = VideoSample {
        id: format!("{split}-{index:05}"),
        label,
        frames,
    };
    Ok((video, planted))
}

/// Balanced train and test splits; every video is generated from its own
/// seed derived from `(spec.seed, split, index)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(generate_with_ground_truth(spec)?.0)
}

/// Like [`generate_synthetic`], also returning the pattern placements for
/// the train and test splits.
pub fn generate_with_ground_truth(spec: &SyntheticSpec) -> Result<(Dataset, Vec<Vec<Planted>>, Vec<Vec<Planted>>)> {
    spec.validate()?;
    let classes = class_templates(spec);
    let distractors = distractor_templates(spec);
    let split = |name: &str, per_class: usize| -> Result<(Vec<VideoSample>, Vec<Vec<Planted>>)> {
        let mut videos = Vec::new();
        let mut truth = Vec::new();
        for i in 0..spec.num_classes * per_class {
            // interleave classes so every prefix is close to balanced
            let label = i % spec.num_classes;
            let (v, p) = generate_video(spec, name, i, label, &classes, &distractors)?;
            videos.push(v);
            truth.push(p);
        }
        Ok((videos, truth))
    };
    let (train, train_truth) = split("train", spec.train_per_class)?;
    let (test, test_truth) = split("test", spec.test_per_class)?;
    Ok((
        Dataset {
            num_classes: spec.num_classes,
            train,
            test,
        },
        train_truth,
        test_truth,
    ))
}
