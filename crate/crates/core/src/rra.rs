//! Redundancy reduction attention: iterative spatio-temporal attention
//! summaries with per-channel suppression of the feature maps between
//! glimpses.
//!
//! Maps are channels-major `[c, B·m]` where `m = n·h·w` positions per video;
//! attention weights are `[B, m]`, summaries and reduction vectors `[B, c]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rra_tensor::{Activation, BatchNormState, Graph, Mode, Tensor, Var};

use crate::backbone::FeatureMapBatch;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    #[default]
    Full,
    /// Uniform weights over all positions instead of attention.
    AvgPool,
    /// Softmax per frame over `h·w`, then the average of the frame summaries.
    SpatialAttention,
    NoBatchNorm,
    NoRelu,
    /// Linear reduction vector.
    NoTanh,
    /// `-relu` in place of `tanh`.
    NegRelu,
}

impl Variant {
    pub const ABLATIONS: [Variant; 6] = [
        Variant::AvgPool,
        Variant::SpatialAttention,
        Variant::NoBatchNorm,
        Variant::NoRelu,
        Variant::NoTanh,
        Variant::NegRelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::AvgPool => "avg-pool",
            Variant::SpatialAttention => "spatial-attention",
            Variant::NoBatchNorm => "no-bn",
            Variant::NoRelu => "no-relu",
            Variant::NoTanh => "no-tanh",
            Variant::NegRelu => "neg-relu",
        }
    }

    pub fn reduction_activation(self) -> Activation {
        match self {
            Variant::NoTanh => Activation::Linear,
            Variant::NegRelu => Activation::NegRelu,
            _ => Activation::Tanh,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Variant::Full)
            .chain(Variant::ABLATIONS)
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// `softmax(W_aᵀ X̄)` over all `n·h·w` positions of each video jointly.
/// `w_a` is `[c]`; the result is `[videos, m]`.
pub fn attention_weights(g: &mut Graph, xbar: Var, w_a: Var, videos: usize) -> Result<Var> {
    let logits = attention_logits(g, xbar, w_a, videos)?;
    Ok(g.softmax(logits)?)
}

fn attention_logits(g: &mut Graph, xbar: Var, w_a: Var, videos: usize) -> Result<Var> {
    let c = g.shape(w_a).iter().product::<usize>();
    let (xc, cols) = g.value(xbar).as_matrix();
    if xc != c || videos == 0 || cols % videos != 0 {
        return Err(Error::Geometry(format!(
            "attention over {:?} with {c} weights and {videos} videos",
            g.shape(xbar)
        )));
    }
    let row = g.reshape(w_a, &[1, c])?;
    let logits = g.matmul(row, xbar)?;
    Ok(g.reshape(logits, &[videos, cols / videos])?)
}

/// Per-frame softmax over `h·w` positions, scaled by `1/n` so that the
/// summary is the mean of the `n` per-frame summaries.
pub fn spatial_attention_weights(g: &mut Graph, xbar: Var, w_a: Var, fm: &FeatureMapBatch) -> Result<Var> {
    let logits = attention_logits(g, xbar, w_a, fm.videos)?;
    let per_frame = g.reshape(logits, &[fm.videos * fm.frames, fm.positions_per_frame()])?;
    let a = g.softmax(per_frame)?;
    let a = g.scale(a, 1.0 / fm.frames as f64)?;
    Ok(g.reshape(a, &[fm.videos, fm.positions_per_video()])?)
}

pub fn uniform_weights(g: &mut Graph, videos: usize, positions: usize) -> Var {
    g.constant(Tensor::full(&[videos, positions], 1.0 / positions as f64))
}

/// `x̂ = X̄ a` per video: `[videos, c]`.
pub fn summarize(g: &mut Graph, xbar: Var, a: Var) -> Result<Var> {
    Ok(g.segment_weighted_sum(xbar, a)?)
}

/// `x̃ = act(W x̂ + b)` with `W: [c, c]`, `b: [c]`.
pub fn reduction_vector(g: &mut Graph, xhat: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let z = g.linear(xhat, w, Some(b))?;
    Ok(g.activation(z, act)?)
}

/// Affine parameters and running statistics of one update step's BN.
pub struct NormArgs<'a> {
    pub gamma: Var,
    pub beta: Var,
    pub state: &'a mut BatchNormState,
    pub mode: Mode,
}

/// Returns `(X^{k+1}, X̄^{k+1})` where `X^{k+1} = X^k ⊕ x̃` and
/// `X̄^{k+1} = ReLU(BN(X^{k+1}))`. `norm = None` skips batch norm and
/// `relu = false` skips the ReLU.
pub fn update_feature_maps(
    g: &mut Graph,
    x: Var,
    xtilde: Var,
    norm: Option<NormArgs<'_>>,
    relu: bool,
) -> Result<(Var, Var)> {
    let next = g.broadcast_add_channel(x, xtilde)?;
    let mut out = next;
    if let Some(n) = norm {
        out = g.batchnorm(out, n.gamma, n.beta, n.state, n.mode)?;
    }
    if relu {
        out = g.relu(out)?;
    }
    Ok((next, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlimpseState {
    pub k: usize,
    /// `X^k`, the carried pre-normalization map.
    pub x: Var,
    /// `X̄^k`, the map attended to.
    pub xbar: Var,
    /// `[videos, m]`
    pub a: Var,
    /// `[videos, c]`
    pub xhat: Var,
    /// `[videos, c]`; absent for the last glimpse and for parallel heads.
    pub xtilde: Option<Var>,
    pub x_next: Option<Var>,
    pub xbar_next: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RraConfig {
    pub channels: usize,
    pub glimpses: usize,
    pub variant: Variant,
    /// Independent heads on the unmodified map, no suppression.
    pub parallel: bool,
}

impl RraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.glimpses == 0 {
            return Err(Error::Config("glimpses must be at least 1".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("feature channels must be positive".into()));
        }
        if self.parallel && self.variant != Variant::Full {
            return Err(Error::Config("parallel glimpses only support the full variant".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct UpdateParams {
    fc_w: ParamId,
    fc_b: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RraBlock {
    config: RraConfig,
    w_a: Vec<Option<ParamId>>,
    updates: Vec<UpdateParams>,
    pub bn: Vec<BatchNormState>,
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..=bound)).collect()).expect("shape matches data")
}

impl RraBlock {
    pub fn new<R: Rng>(config: RraConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let bound = 1.0 / (c as f64).sqrt();
        let w_a = (0..config.glimpses)
            .map(|k| {
                (config.variant != Variant::AvgPool)
                    .then(|| store.add(format!("rra.{k}.w_a"), uniform_tensor(rng, &[c], bound), ParamGroup::Attention))
            })
            .collect();
        let steps = if config.parallel { 0 } else { config.glimpses - 1 };
        let mut updates = Vec::with_capacity(steps);
        let mut bn = Vec::new();
        for k in 0..steps {
            let fc_w = store.add(format!("rra.{k}.fc.weight"), uniform_tensor(rng, &[c, c], bound), ParamGroup::Reduction);
            let fc_b = store.add(format!("rra.{k}.fc.bias"), uniform_tensor(rng, &[c], bound), ParamGroup::Reduction);
            let norm = (config.variant != Variant::NoBatchNorm).then(|| {
                bn.push(BatchNormState::new(c));
                (
                    store.add(format!("rra.{k}.bn.gamma"), Tensor::ones(&[c]), ParamGroup::Reduction),
                    store.add(format!("rra.{k}.bn.beta"), Tensor::zeros(&[c]), ParamGroup::Reduction),
                )
            });
            updates.push(UpdateParams { fc_w, fc_b, norm });
        }
        Ok(RraBlock {
            config,
            w_a,
            updates,
            bn,
        })
    }

    pub fn config(&self) -> &RraConfig {
        &self.config
    }

    fn weights(&self, g: &mut Graph, vars: &[Var], k: usize, fm: &FeatureMapBatch, xbar: Var) -> Result<Var> {
        let w_a = self.w_a[k].map(|id| vars[id.0]);
        match (self.config.variant, w_a) {
            (Variant::SpatialAttention, Some(w)) => spatial_attention_weights(g, xbar, w, fm),
            (_, Some(w)) => attention_weights(g, xbar, w, fm.videos),
            (_, None) => Ok(uniform_weights(g, fm.videos, fm.positions_per_video())),
        }
    }

    /// Runs all glimpses on the backbone map `fm.x`, which serves as both
    /// `X¹` and `X̄¹`.
    pub fn run_glimpses(&mut self, g: &mut Graph, vars: &[Var], fm: &FeatureMapBatch, mode: Mode) -> Result<Vec<GlimpseState>> {
        if fm.channels != self.config.channels {
            return Err(Error::Geometry(format!(
                "feature map has {} channels, attention expects {}",
                fm.channels, self.config.channels
            )));
        }
        if self.config.parallel {
            return self.parallel_glimpses(g, vars, fm);
        }
        let k_total = self.config.glimpses;
        let act = self.config.variant.reduction_activation();
        let relu = self.config.variant != Variant::NoRelu;
        let (mut x, mut xbar) = (fm.x, fm.x);
        let mut states = Vec::with_capacity(k_total);
        let mut bn_index = 0;
        for k in 0..k_total {
            let a = self.weights(g, vars, k, fm, xbar)?;
            let xhat = summarize(g, xbar, a)?;
            let mut st = GlimpseState {
                k,
                x,
                xbar,
                a,
                xhat,
                xtilde: None,
                x_next: None,
                xbar_next: None,
            };
            if k + 1 < k_total {
                let up = &self.updates[k];
                let xt = reduction_vector(g, xhat, vars[up.fc_w.0], vars[up.fc_b.0], act)?;
                let norm = match up.norm {
                    Some((gamma, beta)) => Some(NormArgs {
                        gamma: vars[gamma.0],
                        beta: vars[beta.0],
                        state: {
                            bn_index += 1;
                            &mut self.bn[bn_index - 1]
                        },
                        mode,
                    }),
                    None => None,
                };
                let (xn, xbn) = update_feature_maps(g, x, xt, norm, relu)?;
                st.xtilde = Some(xt);
                st.x_next = Some(xn);
                st.xbar_next = Some(xbn);
                x = xn;
                xbar = xbn;
            }
            states.push(st);
        }
        Ok(states)
    }

    /// `K` independent attention heads on the unmodified map.
    pub fn parallel_glimpses(&self, g: &mut Graph, vars: &[Var], fm: &FeatureMapBatch) -> Result<Vec<GlimpseState>> {
        (0..self.config.glimpses)
            .map(|k| {
                let a = self.weights(g, vars, k, fm, fm.x)?;
                let xhat = summarize(g, fm.x, a)?;
                Ok(GlimpseState {
                    k,
                    x: fm.x,
                    xbar: fm.x,
                    a,
                    xhat,
                    xtilde: None,
                    x_next: None,
                    xbar_next: None,
                })
            })
            .collect()
    }
}
