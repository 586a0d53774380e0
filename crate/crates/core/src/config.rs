//! Run configuration in a line-based `key = value` format with `[section]`
//! headers. `#` starts a comment. Every key can also be overridden as
//! `section.key=value`, and [`RunConfig::echo`] writes the fully resolved
//! configuration back in the same format.
//!
//! ```text
//! [reid]
//! variant = spreid_w_fg
//! phase1_iters = 2000
//!
//! [grouping]
//! head = Hat, Hair, Sunglasses, Face
//! ```

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::{AggregationConfig, Variant};
use crate::model::ReidConfig;
use crate::parsing::{AsppMerge, CoarseGrouping, FineLabel, ParserConfig};
use crate::retrieval::{Metric, RerankConfig};
use crate::synth::SynthConfig;
use crate::trainer::{OptimizerConfig, PhaseSchedule, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserTraining {
    pub iterations: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ParserTraining {
    fn default() -> Self {
        Self {
            iterations: 500,
            base_lr: 0.06,
            batch_size: 15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidSettings {
    pub backbone: BackboneConfig,
    pub aggregation: AggregationConfig,
    pub seed: u64,
}

impl Default for ReidSettings {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            aggregation: AggregationConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalSettings {
    pub metric: Metric,
    pub rerank: RerankConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub parser: ParserConfig,
    pub parser_training: ParserTraining,
    pub grouping: CoarseGrouping,
    pub reid: ReidSettings,
    pub schedule: TrainSchedule,
    pub optimizer: OptimizerConfig,
    pub retrieval: RetrievalSettings,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_labels(key: &str, v: &str) -> Result<Vec<FineLabel>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| FineLabel::from_name(s).ok_or_else(|| Error::Config(format!("{key}: unknown label {s:?}"))))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn labels(xs: &[FineLabel]) -> String {
    xs.iter().map(|l| l.name()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let k = key;
        match key {
            "data.seed" => self.synth.seed = parse(k, v)?,
            "data.n_ids" => self.synth.n_ids = parse(k, v)?,
            "data.imgs_per_id" => self.synth.imgs_per_id = parse(k, v)?,
            "data.n_cams" => self.synth.n_cams = parse(k, v)?,
            "data.train_ids" => self.synth.train_ids = parse(k, v)?,
            "data.height" => self.synth.height = parse(k, v)?,
            "data.width" => self.synth.width = parse(k, v)?,
            "data.clutter_density" => self.synth.clutter_density = parse(k, v)?,
            "data.occlusion_prob" => self.synth.occlusion_prob = parse(k, v)?,
            "data.pose_jitter" => self.synth.pose_jitter = parse(k, v)?,
            "data.noise" => self.synth.noise = parse(k, v)?,

            "parser.stem_channels" => self.parser.backbone.stem_channels = parse_list(k, v)?,
            "parser.block_channels" => self.parser.backbone.block_channels = parse_list(k, v)?,
            "parser.convs_per_stage" => self.parser.backbone.convs_per_stage = parse(k, v)?,
            "parser.aspp_channels" => self.parser.aspp_channels = parse(k, v)?,
            "parser.aspp_rates" => self.parser.aspp_rates = parse_list(k, v)?,
            "parser.aspp_merge" => {
                self.parser.merge = match v {
                    "sum" => AsppMerge::Sum,
                    "concat" => AsppMerge::Concat,
                    _ => return Err(Error::Config(format!("{k}: expected sum or concat, got {v:?}"))),
                }
            }
            "parser.input_height" => self.parser.input_h = parse(k, v)?,
            "parser.input_width" => self.parser.input_w = parse(k, v)?,
            "parser.iterations" => self.parser_training.iterations = parse(k, v)?,
            "parser.base_lr" => self.parser_training.base_lr = parse(k, v)?,
            "parser.batch_size" => self.parser_training.batch_size = parse(k, v)?,
            "parser.seed" => self.parser_training.seed = parse(k, v)?,

            "grouping.head" => self.grouping.head = parse_labels(k, v)?,
            "grouping.upper_body" => self.grouping.upper_body = parse_labels(k, v)?,
            "grouping.lower_body" => self.grouping.lower_body = parse_labels(k, v)?,
            "grouping.shoes" => self.grouping.shoes = parse_labels(k, v)?,

            "reid.variant" => self.reid.aggregation.variant = parse(k, v)?,
            "reid.weight_sharing" => self.reid.aggregation.weight_sharing = parse(k, v)?,
            "reid.stem_channels" => self.reid.backbone.stem_channels = parse_list(k, v)?,
            "reid.block_channels" => self.reid.backbone.block_channels = parse_list(k, v)?,
            "reid.convs_per_stage" => self.reid.backbone.convs_per_stage = parse(k, v)?,
            "reid.seed" => self.reid.seed = parse(k, v)?,
            "reid.phase1_iters" => self.schedule.phase1.iterations = parse(k, v)?,
            "reid.phase1_lr" => self.schedule.phase1.base_lr = parse(k, v)?,
            "reid.phase1_height" => self.schedule.phase1.height = parse(k, v)?,
            "reid.phase1_width" => self.schedule.phase1.width = parse(k, v)?,
            "reid.phase2_iters" => self.schedule.phase2.iterations = parse(k, v)?,
            "reid.phase2_lr" => self.schedule.phase2.base_lr = parse(k, v)?,
            "reid.phase2_height" => self.schedule.phase2.height = parse(k, v)?,
            "reid.phase2_width" => self.schedule.phase2.width = parse(k, v)?,
            "reid.batch_size" => self.schedule.batch_size = parse(k, v)?,
            "reid.decay_steps" => self.schedule.decay.steps = parse(k, v)?,
            "reid.decay_rate" => self.schedule.decay.rate = parse(k, v)?,

            "optimizer.momentum" => self.optimizer.momentum = parse(k, v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(k, v)?,
            "optimizer.clip_norm" => self.optimizer.clip_norm = parse(k, v)?,

            "retrieval.metric" => self.retrieval.metric = parse(k, v)?,
            "retrieval.k1" => self.retrieval.rerank.k1 = parse(k, v)?,
            "retrieval.k2" => self.retrieval.rerank.k2 = parse(k, v)?,
            "retrieval.lambda" => self.retrieval.rerank.lambda = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, grouped by section.
    pub fn entries(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        let s = &self.synth;
        let p = &self.parser;
        let pt = &self.parser_training;
        let g = &self.grouping;
        let r = &self.reid;
        let sc = &self.schedule;
        let o = &self.optimizer;
        let rt = &self.retrieval;
        let metric = match rt.metric {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        };
        let merge = match p.merge {
            AsppMerge::Sum => "sum",
            AsppMerge::Concat => "concat",
        };
        vec![
            (
                "data",
                vec![
                    ("seed", s.seed.to_string()),
                    ("n_ids", s.n_ids.to_string()),
                    ("imgs_per_id", s.imgs_per_id.to_string()),
                    ("n_cams", s.n_cams.to_string()),
                    ("train_ids", s.train_ids.to_string()),
                    ("height", s.height.to_string()),
                    ("width", s.width.to_string()),
                    ("clutter_density", s.clutter_density.to_string()),
                    ("occlusion_prob", s.occlusion_prob.to_string()),
                    ("pose_jitter", s.pose_jitter.to_string()),
                    ("noise", s.noise.to_string()),
                ],
            ),
            (
                "parser",
                vec![
                    ("stem_channels", join(&p.backbone.stem_channels)),
                    ("block_channels", join(&p.backbone.block_channels)),
                    ("convs_per_stage", p.backbone.convs_per_stage.to_string()),
                    ("aspp_channels", p.aspp_channels.to_string()),
                    ("aspp_rates", join(&p.aspp_rates)),
                    ("aspp_merge", merge.to_string()),
                    ("input_height", p.input_h.to_string()),
                    ("input_width", p.input_w.to_string()),
                    ("iterations", pt.iterations.to_string()),
                    ("base_lr", pt.base_lr.to_string()),
                    ("batch_size", pt.batch_size.to_string()),
                    ("seed", pt.seed.to_string()),
                ],
            ),
            (
                "grouping",
                vec![
                    ("head", labels(&g.head)),
                    ("upper_body", labels(&g.upper_body)),
                    ("lower_body", labels(&g.lower_body)),
                    ("shoes", labels(&g.shoes)),
                ],
            ),
            (
                "reid",
                vec![
                    ("variant", r.aggregation.variant.to_string()),
                    ("weight_sharing", r.aggregation.weight_sharing.to_string()),
                    ("stem_channels", join(&r.backbone.stem_channels)),
                    ("block_channels", join(&r.backbone.block_channels)),
                    ("convs_per_stage", r.backbone.convs_per_stage.to_string()),
                    ("seed", r.seed.to_string()),
                    ("phase1_iters", sc.phase1.iterations.to_string()),
                    ("phase1_lr", sc.phase1.base_lr.to_string()),
                    ("phase1_height", sc.phase1.height.to_string()),
                    ("phase1_width", sc.phase1.width.to_string()),
                    ("phase2_iters", sc.phase2.iterations.to_string()),
                    ("phase2_lr", sc.phase2.base_lr.to_string()),
                    ("phase2_height", sc.phase2.height.to_string()),
                    ("phase2_width", sc.phase2.width.to_string()),
                    ("batch_size", sc.batch_size.to_string()),
                    ("decay_steps", sc.decay.steps.to_string()),
                    ("decay_rate", sc.decay.rate.to_string()),
                ],
            ),
            (
                "optimizer",
                vec![
                    ("momentum", o.momentum.to_string()),
                    ("weight_decay", o.weight_decay.to_string()),
                    ("clip_norm", o.clip_norm.to_string()),
                ],
            ),
            (
                "retrieval",
                vec![
                    ("metric", metric.to_string()),
                    ("k1", rt.rerank.k1.to_string()),
                    ("k2", rt.rerank.k2.to_string()),
                    ("lambda", rt.rerank.lambda.to_string()),
                ],
            ),
        ]
    }

    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (i, (section, kvs)) in self.entries().into_iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in kvs {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    /// Applies a configuration text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: key outside any [section]", n + 1)));
            }
            self.set(&format!("{section}.{}", k.trim()), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Applies `section.key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not section.key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.parser.validate()?;
        self.grouping.validate()?;
        self.reid.backbone.validate()?;
        if self.reid.backbone.output_stride != 32 {
            return Err(Error::Config("re-id backbone must have output stride 32".into()));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.retrieval.rerank.validate().map_err(|e| Error::Config(e.to_string()))?;
        let pt = &self.parser_training;
        if pt.batch_size == 0 || !(pt.base_lr > 0.0) {
            return Err(Error::Config("parser batch_size and base_lr must be positive".into()));
        }
        crate::trainer::decay_points(pt.iterations, self.schedule.decay.steps)?;
        Ok(())
    }

    pub fn reid_config(&self, num_classes: usize) -> ReidConfig {
        ReidConfig {
            backbone: self.reid.backbone.clone(),
            aggregation: self.reid.aggregation,
            num_classes,
        }
    }

    pub fn reid_config_for(&self, variant: Variant, num_classes: usize) -> ReidConfig {
        let mut c = self.reid_config(num_classes);
        c.aggregation.variant = variant;
        c
    }

    pub fn parser_schedule(&self) -> PhaseSchedule {
        PhaseSchedule {
            iterations: self.parser_training.iterations,
            base_lr: self.parser_training.base_lr,
            height: self.parser.input_h,
            width: self.parser.input_w,
        }
    }
}
