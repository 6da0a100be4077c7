//! Small convolutional feature extractor producing the channels-major
//! feature matrix `X = [x_1, …, x_n]` of shape `[c, n·h·w]`.

use rand::Rng;
use rra_tensor::{BatchNormState, Conv2dSpec, Graph, Mode, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub stages: Vec<ConvStage>,
    pub with_batchnorm: bool,
    pub frozen: bool,
}

impl BackboneConfig {
    /// Two stride-2 stages of 16 and 32 channels.
    pub fn toy(in_channels: usize, input_size: usize) -> Self {
        BackboneConfig {
            in_channels,
            input_size,
            stages: [16, 32]
                .into_iter()
                .map(|out_channels| ConvStage {
                    out_channels,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
            with_batchnorm: true,
            frozen: false,
        }
    }

    /// Feature channel count `c`.
    pub fn channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.out_channels)
    }

    /// Spatial side length of the output feature map.
    pub fn output_size(&self) -> usize {
        self.stages.iter().fold(self.input_size, |size, s| {
            let padded = size + 2 * (s.kernel / 2);
            if padded < s.kernel || s.stride == 0 {
                0
            } else {
                (padded - s.kernel) / s.stride + 1
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.iter().any(|s| s.out_channels == 0 || s.kernel == 0 || s.stride == 0) {
            return Err(Error::Config("conv stages need positive channels, kernel and stride".into()));
        }
        if self.channels() == 0 || self.output_size() == 0 {
            return Err(Error::Config(format!(
                "backbone leaves no features for {0}x{0} inputs",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// The feature map of a batch of videos, channels-major. Column
/// `v·(n·h·w) + (frame·h + row)·w + col` holds the feature vector of video
/// `v` at `(frame, row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMapBatch {
    pub x: Var,
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMapBatch {
    pub fn positions_per_video(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn positions_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn with_map(self, x: Var) -> Self {
        FeatureMapBatch { x, ..self }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    weight: ParamId,
    /// Absent when batch norm follows, which would cancel it.
    bias: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
    spec: Conv2dSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<Layer>,
    pub bn: Vec<BatchNormState>,
}

impl Backbone {
    pub fn new<R: Rng>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut bn = Vec::new();
        let mut cin = config.in_channels;
        for (i, st) in config.stages.iter().enumerate() {
            let fan_in = cin * st.kernel * st.kernel;
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = st.out_channels * fan_in;
            let w = Tensor::new(
                &[st.out_channels, cin, st.kernel, st.kernel],
                (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            )?;
            let weight = store.add(format!("backbone.{i}.weight"), w, ParamGroup::Backbone);
            let bias = (!config.with_batchnorm).then(|| {
                store.add(format!("backbone.{i}.bias"), Tensor::zeros(&[st.out_channels]), ParamGroup::Backbone)
            });
            let norm = config.with_batchnorm.then(|| {
                bn.push(BatchNormState::new(st.out_channels));
                (
                    store.add(format!("backbone.{i}.bn.gamma"), Tensor::ones(&[st.out_channels]), ParamGroup::Backbone),
                    store.add(format!("backbone.{i}.bn.beta"), Tensor::zeros(&[st.out_channels]), ParamGroup::Backbone),
                )
            });
            layers.push(Layer {
                weight,
                bias,
                norm,
                spec: Conv2dSpec {
                    stride: st.stride,
                    padding: st.kernel / 2,
                },
            });
            cin = st.out_channels;
        }
        if config.frozen {
            store.set_frozen(ParamGroup::Backbone, true);
        }
        Ok(Backbone { config, layers, bn })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn set_frozen(&mut self, store: &mut ParamStore, frozen: bool) {
        self.config.frozen = frozen;
        store.set_frozen(ParamGroup::Backbone, frozen);
    }

    /// Runs every frame through the shared conv stages.
    ///
    /// `frames` is `[in_channels, videos·n, size, size]`. Batch-norm layers
    /// use running statistics when `mode` is eval or `freeze_stats` is set.
    pub fn extract_features(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        frames: Var,
        videos: usize,
        mode: Mode,
        freeze_stats: bool,
    ) -> Result<FeatureMapBatch> {
        let shape = g.shape(frames).to_vec();
        let size = self.config.input_size;
        if shape.len() != 4 || shape[0] != self.config.in_channels || shape[2] != size || shape[3] != size {
            return Err(Error::Data(format!(
                "backbone expects [{}, n, {size}, {size}] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        if videos == 0 || !shape[1].is_multiple_of(videos) {
            return Err(Error::Data(format!("{} frames do not split into {videos} videos", shape[1])));
        }
        let bn_mode = if freeze_stats { Mode::Eval } else { mode };
        let mut x = frames;
        let mut bn_states = self.bn.iter_mut();
        for layer in &self.layers {
            x = g.conv2d(x, vars[layer.weight.0], layer.bias.map(|b| vars[b.0]), layer.spec)?;
            if let Some((gamma, beta)) = layer.norm {
                let st = bn_states.next().expect("one state per normalized layer");
                x = g.batchnorm(x, vars[gamma.0], vars[beta.0], st, bn_mode)?;
            }
            x = g.relu(x)?;
        }
        let out = g.shape(x).to_vec();
        let (c, n, h, w) = (out[0], out[1], out[2], out[3]);
        let x = g.reshape(x, &[c, n * h * w])?;
        Ok(FeatureMapBatch {
            x,
            videos,
            frames: n / videos,
            height: h,
            width: w,
            channels: c,
        })
    }
}
