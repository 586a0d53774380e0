//! Re-identification and parsing networks with their parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{AggregationConfig, Variant, FOREGROUND_ROW, PART_ROWS};
use crate::ops::{ParamId, ParamStore, Tape, Var};
use crate::parsing::{CoarseGrouping, Parser, ParserConfig, ProbabilityMaps, NUM_COARSE};
use crate::rng;
use crate::tensor::{bilinear_resize, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidConfig {
    pub backbone: BackboneConfig,
    pub aggregation: AggregationConfig,
    /// Number of training identities (classifier outputs).
    pub num_classes: usize,
}

/// Backbone(s) plus a single affine identity classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidModel {
    config: ReidConfig,
    backbone: Backbone,
    global_backbone: Option<Backbone>,
    classifier: (ParamId, ParamId),
    pub params: ParamStore,
}

/// Recorded outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ReidOutput {
    pub descriptor: Var,
    pub logits: Var,
}

impl ReidModel {
    /// Parameters come from the `init:reid` stream of `seed`. Without weight
    /// sharing the second backbone restarts that stream, so both copies
    /// start identical.
    pub fn new(config: &ReidConfig, seed: u64) -> Result<Self> {
        if config.backbone.output_stride != 32 {
            return Err(Error::Config("re-id backbone must have output stride 32".into()));
        }
        if config.num_classes < 2 {
            return Err(Error::Config("need at least two training identities".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = rng::stream(seed, rng::INIT_REID);
        let backbone = Backbone::build_into(&config.backbone, &mut params, "reid.", &mut rng)?;
        let split = config.aggregation.variant.uses_parsing() && !config.aggregation.weight_sharing;
        let global_backbone = if split {
            let mut rng = rng::stream(seed, rng::INIT_REID);
            Some(Backbone::build_into(&config.backbone, &mut params, "reid_global.", &mut rng)?)
        } else {
            None
        };
        let d = config.aggregation.variant.descriptor_dim(config.backbone.feature_channels());
        let bound = (1.0 / d as f64).sqrt();
        let w = Tensor::from_fn(&[config.num_classes, d], |_| rng.gen_range(-bound..bound));
        let cw = params.add("classifier.weight", w)?;
        let cb = params.add("classifier.bias", Tensor::zeros(&[config.num_classes]))?;
        Ok(Self {
            config: config.clone(),
            backbone,
            global_backbone,
            classifier: (cw, cb),
            params,
        })
    }

    pub fn config(&self) -> &ReidConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.aggregation.variant
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn global_backbone(&self) -> Option<&Backbone> {
        self.global_backbone.as_ref()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.variant().descriptor_dim(self.backbone.feature_channels())
    }

    /// Records the head on `tape`. `maps` are `[N×5×h×w]` spatially
    /// normalized coarse maps, treated as constants; required for the
    /// semantic variants and ignored by the baseline.
    pub fn forward(&self, tape: &mut Tape, images: Var, maps: Option<&Tensor>) -> Result<ReidOutput> {
        let acts = self.backbone.forward(tape, images)?;
        let global = match &self.global_backbone {
            Some(g) => {
                let a = g.forward(tape, images)?;
                tape.global_avg_pool(a)?
            }
            None => tape.global_avg_pool(acts)?,
        };
        let descriptor = match self.variant() {
            Variant::Baseline => global,
            v => {
                let maps = maps.ok_or_else(|| Error::Parameter(format!("{v} needs probability maps")))?;
                let n = tape.value(images).shape()[0];
                let [mn, NUM_COARSE, mh, mw] = *maps.shape() else {
                    return Err(Error::dim(format!("maps must be N×5×H×W, got {:?}", maps.shape())));
                };
                if mn != n {
                    return Err(Error::dim(format!("{mn} map sets for {n} images")));
                }
                let aligned = tape.resize(acts, mh, mw)?;
                let m = tape.leaf(maps.clone());
                let pooled = tape.weighted_pool(aligned, m)?;
                let fused = tape.max_rows(pooled, PART_ROWS.start, PART_ROWS.end)?;
                if v == Variant::SpreidWFg {
                    let fg = tape.select_row(pooled, FOREGROUND_ROW)?;
                    tape.concat(&[fused, fg, global])?
                } else {
                    tape.concat(&[fused, global])?
                }
            }
        };
        let logits = tape.affine(descriptor, self.classifier.0, self.classifier.1)?;
        Ok(ReidOutput { descriptor, logits })
    }

    /// Descriptors (one row per image) for a batch at the current resolution.
    pub fn describe(&self, images: &Tensor, maps: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let x = tape.leaf(images.clone());
        let out = self.forward(&mut tape, x, maps)?;
        Ok(tape.value(out.descriptor).clone())
    }
}

/// A parser with its own parameters; frozen while re-id models train.
#[derive(Debug, Clone, PartialEq)]
pub struct ParserModel {
    pub parser: Parser,
    pub grouping: CoarseGrouping,
    pub params: ParamStore,
}

impl ParserModel {
    pub fn new(config: &ParserConfig, grouping: CoarseGrouping, seed: u64) -> Result<Self> {
        grouping.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng::stream(seed, rng::INIT_PARSE);
        let parser = Parser::build_into(config, &mut params, "parse.", &mut rng)?;
        Ok(Self {
            parser,
            grouping,
            params,
        })
    }

    pub fn config(&self) -> &ParserConfig {
        self.parser.config()
    }

    pub fn probability_maps(&self, images: &Tensor) -> Result<Vec<ProbabilityMaps>> {
        self.parser.probability_maps(&self.params, images, &self.grouping)
    }

    /// `[5×h×w]` coarse maps for every image, computed in batches.
    pub fn coarse_maps(&self, images: &[Tensor], batch: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let t = Tensor::stack(chunk)?;
            out.extend(self.probability_maps(&t)?.into_iter().map(|m| m.coarse));
        }
        Ok(out)
    }
}

/// Runs the full two-branch pipeline on a batch: the parser at its own
/// resolution, the re-id branch on `images` resized to `reid_size`, the
/// re-id activations upsampled onto the parse grid, and the head. Returns
/// the descriptors `[N×D]`.
pub fn spreid_forward(reid: &ReidModel, parser: Option<&ParserModel>, images: &Tensor, reid_size: (usize, usize)) -> Result<Tensor> {
    let maps = match (reid.variant().uses_parsing(), parser) {
        (false, _) => None,
        (true, Some(p)) => {
            let maps = p.probability_maps(images)?;
            Some(Tensor::stack(&maps.into_iter().map(|m| m.coarse).collect::<Vec<_>>())?)
        }
        (true, None) => return Err(Error::Parameter(format!("{} needs a parser", reid.variant()))),
    };
    let x = bilinear_resize(images, reid_size.0, reid_size.1)?;
    reid.describe(&x, maps.as_ref())
}
