//! Uniform temporal segments and one-frame-per-segment sampling.

use std::ops::Range;

use rand::Rng;
use rra_tensor::Mode;

use super::VideoSample;
use crate::error::{Error, Result};
use crate::seeds::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSpec {
    pub n_segments: usize,
    pub mode: Mode,
    pub seed: u64,
    pub test_crops: usize,
    pub flip: bool,
}

impl SamplingSpec {
    pub fn train(n_segments: usize, seed: u64) -> Self {
        SamplingSpec {
            n_segments,
            mode: Mode::Train,
            seed,
            test_crops: 1,
            flip: false,
        }
    }

    pub fn test(n_segments: usize, test_crops: usize, flip: bool) -> Self {
        SamplingSpec {
            n_segments,
            mode: Mode::Eval,
            seed: 0,
            test_crops,
            flip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 {
            return Err(Error::Config("n_segments must be at least 1".into()));
        }
        if !matches!(self.test_crops, 1 | 5) {
            return Err(Error::Config(format!("test_crops must be 1 or 5, got {}", self.test_crops)));
        }
        Ok(())
    }

    /// Number of model inputs per video under the test protocol.
    pub fn inputs_per_video(&self) -> usize {
        self.n_segments * self.test_crops * if self.flip { 2 } else { 1 }
    }
}

/// Splits `[0, frame_count)` into `n` contiguous ranges whose sizes differ
/// by at most one, with the remainder going to the earliest segments.
///
/// When `frame_count < n`, every segment is a single frame and segment `i`
/// is clamped to frame `floor(i · frame_count / n)`, so frames repeat.
pub fn slice_segments(frame_count: usize, n: usize) -> Vec<Range<usize>> {
    let frame_count = frame_count.max(1);
    let n = n.max(1);
    if frame_count < n {
        return (0..n)
            .map(|i| {
                let f = i * frame_count / n;
                f..f + 1
            })
            .collect();
    }
    let base = frame_count / n;
    let extra = frame_count % n;
    let mut start = 0;
    (0..n)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// One uniformly drawn frame per segment, seeded by `(seed, video id, epoch)`.
pub fn sample_train_frames(video: &VideoSample, spec: &SamplingSpec, epoch: usize) -> Vec<usize> {
    let mut rng = rng_for(spec.seed, &[&"train-frames", &video.id, &epoch]);
    slice_segments(video.frames.len(), spec.n_segments)
        .into_iter()
        .map(|r| rng.random_range(r))
        .collect()
}

/// The middle frame `start + (end - start) / 2` of every segment.
pub fn sample_test_frames(video: &VideoSample, spec: &SamplingSpec) -> Vec<usize> {
    test_indices(video.frames.len(), spec.n_segments)
}

pub fn test_indices(frame_count: usize, n: usize) -> Vec<usize> {
    slice_segments(frame_count, n)
        .into_iter()
        .map(|r| r.start + (r.end - r.start) / 2)
        .collect()
}
