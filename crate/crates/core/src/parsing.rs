//! Human semantic parsing: a stride-16 backbone, atrous spatial pyramid
//! pooling, a 1×1 pixel classifier over the 20 fine labels, the grouping of
//! fine labels into five coarse re-identification regions, and segmentation
//! metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{init_conv, Backbone, BackboneConfig};
use crate::container::LabelMap;
use crate::error::{Error, Result};
use crate::ops::{ConvGeometry, ParamId, ParamStore, Tape, Var};
use crate::tensor::{bilinear_resize, channel_softmax, l1_normalize_spatial, Tensor};

macro_rules! fine_labels {
    ($($variant:ident = $name:literal),* $(,)?) => {
        /// The 20 fine human-parsing labels, in classifier channel order.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[repr(u8)]
        pub enum FineLabel { $($variant),* }

        impl FineLabel {
            pub const ALL: [FineLabel; 20] = [$(FineLabel::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(FineLabel::$variant => $name),* }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                match s { $($name => Some(FineLabel::$variant),)* _ => None }
            }
        }
    };
}

fine_labels! {
    Background = "Background",
    Hat = "Hat",
    Hair = "Hair",
    Glove = "Glove",
    Sunglasses = "Sunglasses",
    UpperClothes = "Upper-clothes",
    Dress = "Dress",
    Coat = "Coat",
    Socks = "Socks",
    Pants = "Pants",
    Jumpsuits = "Jumpsuits",
    Scarf = "Scarf",
    Skirt = "Skirt",
    Face = "Face",
    RightArm = "Right-arm",
    LeftArm = "Left-arm",
    RightLeg = "Right-leg",
    LeftLeg = "Left-leg",
    RightShoe = "Right-shoe",
    LeftShoe = "Left-shoe",
}

pub const NUM_FINE: usize = 20;
pub const NUM_COARSE: usize = 5;

impl FineLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Coarse regions, in probability-map channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoarseRegion {
    Foreground = 0,
    Head = 1,
    UpperBody = 2,
    LowerBody = 3,
    Shoes = 4,
}

impl CoarseRegion {
    pub const ALL: [CoarseRegion; 5] = [
        CoarseRegion::Foreground,
        CoarseRegion::Head,
        CoarseRegion::UpperBody,
        CoarseRegion::LowerBody,
        CoarseRegion::Shoes,
    ];
    pub const PARTS: [CoarseRegion; 4] = [
        CoarseRegion::Head,
        CoarseRegion::UpperBody,
        CoarseRegion::LowerBody,
        CoarseRegion::Shoes,
    ];
}

/// Membership of fine labels in the four body-part regions. Foreground is
/// always every non-background label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseGrouping {
    pub head: Vec<FineLabel>,
    pub upper_body: Vec<FineLabel>,
    pub lower_body: Vec<FineLabel>,
    pub shoes: Vec<FineLabel>,
}

impl Default for CoarseGrouping {
    fn default() -> Self {
        use FineLabel::*;
        Self {
            head: vec![Hat, Hair, Sunglasses, Face],
            upper_body: vec![UpperClothes, Dress, Coat, Jumpsuits, Scarf, Glove, RightArm, LeftArm],
            lower_body: vec![Pants, Skirt, Socks, Dress, Jumpsuits, RightLeg, LeftLeg],
            shoes: vec![RightShoe, LeftShoe],
        }
    }
}

impl CoarseGrouping {
    pub fn part(&self, region: CoarseRegion) -> &[FineLabel] {
        match region {
            CoarseRegion::Head => &self.head,
            CoarseRegion::UpperBody => &self.upper_body,
            CoarseRegion::LowerBody => &self.lower_body,
            CoarseRegion::Shoes => &self.shoes,
            CoarseRegion::Foreground => &[],
        }
    }

    /// Every non-background label must belong to at least one part, and the
    /// background to none.
    pub fn validate(&self) -> Result<()> {
        for l in FineLabel::ALL {
            let n = CoarseRegion::PARTS.iter().filter(|r| self.part(**r).contains(&l)).count();
            if l == FineLabel::Background && n > 0 {
                return Err(Error::Config("Background cannot belong to a body part".into()));
            }
            if l != FineLabel::Background && n == 0 {
                return Err(Error::Config(format!("{} is not assigned to any body part", l.name())));
            }
        }
        Ok(())
    }

    /// `[5 × 20]` membership matrix (row per coarse region).
    pub fn membership(&self) -> [[f64; NUM_FINE]; NUM_COARSE] {
        let mut m = [[0.0; NUM_FINE]; NUM_COARSE];
        for l in FineLabel::ALL.iter().skip(1) {
            m[CoarseRegion::Foreground as usize][l.index()] = 1.0;
        }
        for r in CoarseRegion::PARTS {
            for l in self.part(r) {
                m[r as usize][l.index()] = 1.0;
            }
        }
        m
    }
}

/// `coarse[r] = Σ_{l ∈ group(r)} fine[l]` at every pixel; no spatial
/// normalization. Accepts `[20×H×W]` or `[N×20×H×W]`.
pub fn group_to_coarse(fine: &Tensor, grouping: &CoarseGrouping) -> Result<Tensor> {
    let (n, h, w) = match fine.shape() {
        [NUM_FINE, h, w] => (1, *h, *w),
        [n, NUM_FINE, h, w] => (*n, *h, *w),
        s => return Err(Error::dim(format!("expected 20 fine channels, got {s:?}"))),
    };
    let hw = h * w;
    let m = grouping.membership();
    let mut out = vec![0.0; n * NUM_COARSE * hw];
    for b in 0..n {
        for (r, row) in m.iter().enumerate() {
            let dst = &mut out[(b * NUM_COARSE + r) * hw..(b * NUM_COARSE + r + 1) * hw];
            for (l, &member) in row.iter().enumerate() {
                if member != 0.0 {
                    let src = &fine.data()[(b * NUM_FINE + l) * hw..(b * NUM_FINE + l + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    let shape = if fine.rank() == 3 {
        vec![NUM_COARSE, h, w]
    } else {
        vec![n, NUM_COARSE, h, w]
    };
    Ok(Tensor::from_parts(shape, out))
}

/// Per-pixel fine distribution and the spatially normalized coarse maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaps {
    /// `[20×H×W]`, sums to 1 at every pixel.
    pub fine: Tensor,
    /// `[5×H×W]`, every channel sums to 1 over the grid.
    pub coarse: Tensor,
}

impl ProbabilityMaps {
    pub fn from_fine(fine: Tensor, grouping: &CoarseGrouping) -> Result<Self> {
        let coarse = l1_normalize_spatial(&group_to_coarse(&fine, grouping)?)?;
        Ok(Self { fine, coarse })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsppMerge {
    /// Element-wise sum of the branch outputs.
    Sum,
    /// Channel concatenation followed by a 1×1 projection.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParserConfig {
    pub backbone: BackboneConfig,
    pub aspp_channels: usize,
    pub aspp_rates: Vec<usize>,
    pub merge: AsppMerge,
    /// Images are resized to this resolution before parsing.
    pub input_h: usize,
    pub input_w: usize,
}

impl Default for ParserConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                stem_channels: vec![8, 16],
                block_channels: vec![16, 24, 32],
                output_stride: 16,
                ..BackboneConfig::default()
            },
            aspp_channels: 32,
            aspp_rates: vec![3, 6, 9, 12],
            merge: AsppMerge::Sum,
            input_h: 384,
            input_w: 144,
        }
    }
}

impl ParserConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.output_stride != 16 {
            return Err(Error::Config("parser backbone must have output stride 16".into()));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) || self.aspp_channels == 0 {
            return Err(Error::Config("ASPP needs at least one positive rate and channel count".into()));
        }
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::Config("parser input size must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of the probability maps.
    pub fn map_size(&self) -> (usize, usize) {
        (
            self.backbone.feature_extent(self.input_h),
            self.backbone.feature_extent(self.input_w),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aspp {
    branches: Vec<(ParamId, ParamId, ConvGeometry)>,
    projection: Option<(ParamId, ParamId)>,
}

impl Aspp {
    pub fn build_into(
        in_channels: usize,
        out_channels: usize,
        rates: &[usize],
        merge: AsppMerge,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut branches = Vec::new();
        for &r in rates {
            let (w, b) = init_conv(store, &format!("{prefix}aspp.rate{r}"), [out_channels, in_channels, 3, 3], rng)?;
            branches.push((w, b, ConvGeometry::same(3, 1, r)));
        }
        let projection = match merge {
            AsppMerge::Sum => None,
            AsppMerge::Concat => Some(init_conv(
                store,
                &format!("{prefix}aspp.project"),
                [out_channels, out_channels * rates.len(), 1, 1],
                rng,
            )?),
        };
        Ok(Self { branches, projection })
    }

    /// Parallel dilated branches, merged. Spatial size is preserved.
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|(w, b, g)| tape.conv2d(features, *w, *b, *g))
            .collect::<Result<Vec<_>>>()?;
        match self.projection {
            None => outs[1..].iter().try_fold(outs[0], |acc, &o| tape.add(acc, o)),
            Some((w, b)) => {
                let cat = tape.concat(&outs)?;
                tape.conv2d(cat, w, b, ConvGeometry::new(1, 1, 0))
            }
        }
    }

    pub fn branches(&self) -> &[(ParamId, ParamId, ConvGeometry)] {
        &self.branches
    }
}

/// Backbone + ASPP + 1×1 classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Parser {
    config: ParserConfig,
    backbone: Backbone,
    aspp: Aspp,
    classifier: (ParamId, ParamId),
}

impl Parser {
    pub fn build_into(config: &ParserConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::build_into(&config.backbone, store, &format!("{prefix}backbone."), rng)?;
        let c = backbone.feature_channels();
        let aspp = Aspp::build_into(c, config.aspp_channels, &config.aspp_rates, config.merge, store, prefix, rng)?;
        let classifier = init_conv(store, &format!("{prefix}classifier"), [NUM_FINE, config.aspp_channels, 1, 1], rng)?;
        Ok(Self {
            config: config.clone(),
            backbone,
            aspp,
            classifier,
        })
    }

    pub fn config(&self) -> &ParserConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn aspp(&self) -> &Aspp {
        &self.aspp
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.backbone.param_ids();
        for (w, b, _) in &self.aspp.branches {
            ids.extend([*w, *b]);
        }
        if let Some((w, b)) = self.aspp.projection {
            ids.extend([w, b]);
        }
        ids.extend([self.classifier.0, self.classifier.1]);
        ids
    }

    /// Per-pixel logits over the fine labels from ASPP features.
    pub fn pixel_classify(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let act = tape.relu(features);
        tape.conv2d(act, self.classifier.0, self.classifier.1, ConvGeometry::new(1, 1, 0))
    }

    /// `[N×3×H×W]` images at any size → `[N×20×h×w]` logits, where the images
    /// are first resized to the configured parsing resolution.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let x = tape.resize(images, self.config.input_h, self.config.input_w)?;
        let f = self.backbone.forward(tape, x)?;
        let a = self.aspp.forward(tape, f)?;
        self.pixel_classify(tape, a)
    }

    pub fn logits(&self, params: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(params);
        let x = tape.leaf(images.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Probability maps for a batch of images, one entry per image.
    pub fn probability_maps(&self, params: &ParamStore, images: &Tensor, grouping: &CoarseGrouping) -> Result<Vec<ProbabilityMaps>> {
        let logits = self.logits(params, images)?;
        let fine = channel_softmax(&logits)?;
        (0..fine.shape()[0])
            .map(|b| ProbabilityMaps::from_fine(fine.slice0(b), grouping))
            .collect()
    }

    /// Arg-max label maps at `(out_h, out_w)`, upsampling logits bilinearly.
    pub fn predict_labels(&self, params: &ParamStore, images: &Tensor, out_h: usize, out_w: usize) -> Result<Vec<LabelMap>> {
        let logits = bilinear_resize(&self.logits(params, images)?, out_h, out_w)?;
        let hw = out_h * out_w;
        let n = logits.shape()[0];
        (0..n)
            .map(|b| {
                let src = &logits.data()[b * NUM_FINE * hw..(b + 1) * NUM_FINE * hw];
                let labels = (0..hw)
                    .map(|p| {
                        let mut best = 0;
                        for c in 1..NUM_FINE {
                            if src[c * hw + p] > src[best * hw + p] {
                                best = c;
                            }
                        }
                        best as u8
                    })
                    .collect();
                LabelMap::new(out_h, out_w, labels)
            })
            .collect()
    }
}

/// Segmentation scores in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParsingMetrics {
    pub overall_acc: f64,
    pub mean_acc: f64,
    pub mean_iou: f64,
}

/// Accumulated `K×K` confusion counts (`[gt][pred]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::dim(format!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::Domain(format!("label {} out of range for {} classes", p.max(g), self.k)));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU of every class, `None` where the class appears in neither map.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.k;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let g: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
                let p: u64 = (0..k).map(|r| self.counts[r * k + c]).sum();
                (g + p > 0).then(|| tp as f64 / (g + p - tp) as f64)
            })
            .collect()
    }

    pub fn metrics(&self) -> ParsingMetrics {
        let k = self.k;
        let total: u64 = self.counts.iter().sum();
        let diag = |c: usize| self.counts[c * k + c];
        let gt_count = |c: usize| (0..k).map(|p| self.counts[c * k + p]).sum::<u64>();
        let pred_count = |c: usize| (0..k).map(|g| self.counts[g * k + c]).sum::<u64>();
        let correct: u64 = (0..k).map(diag).sum();
        let (mut acc_sum, mut acc_n, mut iou_sum, mut iou_n) = (0.0, 0, 0.0, 0);
        for c in 0..k {
            let (g, p, tp) = (gt_count(c), pred_count(c), diag(c));
            if g > 0 {
                acc_sum += tp as f64 / g as f64;
                acc_n += 1;
            }
            if g + p > 0 {
                iou_sum += tp as f64 / (g + p - tp) as f64;
                iou_n += 1;
            }
        }
        let ratio = |a: f64, n: usize| if n == 0 { 0.0 } else { a / n as f64 };
        ParsingMetrics {
            overall_acc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            mean_acc: ratio(acc_sum, acc_n),
            mean_iou: ratio(iou_sum, iou_n),
        }
    }
}

/// Overall accuracy, mean per-class accuracy (over classes present in the
/// ground truth) and mean IoU (over classes present in either map).
pub fn parsing_metrics(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<ParsingMetrics> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, gt)?;
    Ok(cm.metrics())
}
