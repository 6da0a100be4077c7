//! Frame sequences, temporal segment sampling, augmentation, and the
//! synthetic planted-pattern dataset.

pub mod augment;
pub mod sampling;
pub mod store;
pub mod synthetic;

use rra_tensor::Tensor;

use crate::error::{Error, Result};

/// One image, stored planar as `[channels][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Frame {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Data(format!(
                "frame {channels}x{height}x{width} given {} values",
                data.len()
            )));
        }
        Ok(Frame {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: usize,
    pub frames: Vec<Frame>,
}

impl VideoSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::Data(format!("video {} has no frames", self.id)))?;
        if self.frames.iter().any(|f| !f.same_shape(first)) {
            return Err(Error::Data(format!("video {} mixes frame shapes", self.id)));
        }
        if self.label >= num_classes {
            return Err(Error::Data(format!(
                "video {} label {} >= {num_classes} classes",
                self.id, self.label
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.train
            .iter()
            .chain(&self.test)
            .try_for_each(|v| v.validate(self.num_classes))
    }

    pub fn find(&self, id: &str) -> Option<&VideoSample> {
        self.train.iter().chain(&self.test).find(|v| v.id == id)
    }
}

/// Packs `inputs` (one frame sequence per video, all sequences the same
/// length and all frames the same shape) into a channels-major tensor
/// `[channels, videos·frames, height, width]`.
pub fn pack_frames(inputs: &[Vec<Frame>]) -> Result<Tensor> {
    let first = inputs
        .first()
        .and_then(|v| v.first())
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let per_video = inputs[0].len();
    if inputs.iter().any(|v| v.len() != per_video) {
        return Err(Error::Data("videos in a batch must have equal frame counts".into()));
    }
    let n = inputs.len() * per_video;
    let plane = h * w;
    let mut data = vec![0.0f64; c * n * plane];
    for (fi, frame) in inputs.iter().flatten().enumerate() {
        if !frame.same_shape(first) {
            return Err(Error::Data("frames in a batch must share a shape".into()));
        }
        for ch in 0..c {
            let src = &frame.data[ch * plane..(ch + 1) * plane];
            let dst = &mut data[(ch * n + fi) * plane..(ch * n + fi + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = f64::from(s);
            }
        }
    }
    Ok(Tensor::new(&[c, n, h, w], data)?)
}
