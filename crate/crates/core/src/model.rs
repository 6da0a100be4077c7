//! Backbone, attention block and per-glimpse classifiers wired together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rra_tensor::{BatchNormState, Graph, Mode, Tensor, Var};

use crate::backbone::{Backbone, BackboneConfig, ConvStage, FeatureMapBatch};
use crate::data::{pack_frames, Frame};
use crate::error::{Error, Result};
use crate::heads::glimpse_score;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rra::{GlimpseState, RraBlock, RraConfig, Variant};
use crate::seeds::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_kernel: usize,
    pub backbone_stride: usize,
    pub backbone_batchnorm: bool,
    pub num_classes: usize,
    pub glimpses: usize,
    pub variant: Variant,
    pub parallel: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            input_size: 16,
            backbone_channels: vec![16, 32],
            backbone_kernel: 3,
            backbone_stride: 2,
            backbone_batchnorm: true,
            num_classes: 10,
            glimpses: 4,
            variant: Variant::Full,
            parallel: false,
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            input_size: self.input_size,
            stages: self
                .backbone_channels
                .iter()
                .map(|&out_channels| ConvStage {
                    out_channels,
                    kernel: self.backbone_kernel,
                    stride: self.backbone_stride,
                })
                .collect(),
            with_batchnorm: self.backbone_batchnorm,
            frozen: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub features: FeatureMapBatch,
    pub glimpses: Vec<GlimpseState>,
    /// Raw scores `s^k`, each `[videos, C]`.
    pub scores: Vec<Var>,
    /// `ŷ^k`, each `[videos, C]`.
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RraModel {
    config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub rra: RraBlock,
    heads: Vec<(ParamId, ParamId)>,
}

impl RraModel {
    /// Classifier heads start at zero so an untrained model predicts the
    /// uniform distribution.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[&"init"]);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.backbone(), &mut store, &mut rng)?;
        let c = backbone.config().channels();
        let rra = RraBlock::new(
            RraConfig {
                channels: c,
                glimpses: config.glimpses,
                variant: config.variant,
                parallel: config.parallel,
            },
            &mut store,
            &mut rng,
        )?;
        let heads = (0..config.glimpses)
            .map(|k| {
                (
                    store.add(format!("head.{k}.weight"), Tensor::zeros(&[config.num_classes, c]), ParamGroup::Classifier),
                    store.add(format!("head.{k}.bias"), Tensor::zeros(&[config.num_classes]), ParamGroup::Classifier),
                )
            })
            .collect();
        Ok(RraModel {
            config,
            store,
            backbone,
            rra,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.backbone.set_frozen(&mut self.store, frozen);
    }

    /// Batch-norm running statistics with stable names.
    pub fn bn_states(&self) -> Vec<(String, &BatchNormState)> {
        let bb = self.backbone.bn.iter().enumerate().map(|(i, s)| (format!("backbone.{i}.bn"), s));
        let rra = self.rra.bn.iter().enumerate().map(|(k, s)| (format!("rra.{k}.bn"), s));
        bb.chain(rra).collect()
    }

    pub fn bn_states_mut(&mut self) -> Vec<(String, &mut BatchNormState)> {
        let bb = self.backbone.bn.iter_mut().enumerate().map(|(i, s)| (format!("backbone.{i}.bn"), s));
        let rra = self.rra.bn.iter_mut().enumerate().map(|(k, s)| (format!("rra.{k}.bn"), s));
        bb.chain(rra).collect()
    }

    /// `frames` is `[in_channels, videos·n, size, size]`. `freeze_bn` keeps
    /// the backbone's batch norm on its running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        frames: Var,
        videos: usize,
        mode: Mode,
        freeze_bn: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let features = self.backbone.extract_features(g, vars, frames, videos, mode, freeze_bn)?;
        let glimpses = self.rra.run_glimpses(g, vars, &features, mode)?;
        let mut scores = Vec::with_capacity(glimpses.len());
        let mut probs = Vec::with_capacity(glimpses.len());
        for (st, &(w, b)) in glimpses.iter().zip(&self.heads) {
            let (s, y) = glimpse_score(g, st.xhat, vars[w.0], vars[b.0], self.config.dropout, mode, rng)?;
            scores.push(s);
            probs.push(y);
        }
        Ok(Forward {
            features,
            glimpses,
            scores,
            probs,
        })
    }

    /// Eval-mode raw scores per glimpse, each `[inputs.len(), C]`; every
    /// entry of `inputs` is one frame sequence.
    pub fn score_frames(&mut self, inputs: &[Vec<Frame>]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g);
        let frames = g.constant(pack_frames(inputs)?);
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &vars, frames, inputs.len(), Mode::Eval, false, &mut no_rng)?;
        Ok(out.scores.iter().map(|&s| g.value(s).clone()).collect())
    }
}
