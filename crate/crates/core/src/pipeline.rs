//! Glue between the synthetic data, the trainers and retrieval.

use crate::container::LabelMap;
use crate::error::{Error, Result};
use crate::head::Descriptor;
use crate::model::{ParserModel, ReidModel};
use crate::parsing::{ConfusionMatrix, ParsingMetrics, NUM_FINE};
use crate::retrieval::{combine_descriptors, pairwise_distance, rerank_distances, EvalReport, Metric, RerankConfig};
use crate::synth::{Sample, Split};
use crate::tensor::{bilinear_resize, Tensor};
use crate::trainer::{ParseDataset, ReidDataset};

/// Default batch size for inference.
pub const INFER_BATCH: usize = 16;

/// Training identities mapped to classifier labels `0..n`.
pub fn reid_training_set(samples: &[Sample], parser: Option<&ParserModel>) -> Result<ReidDataset> {
    let train: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Split("no training images".into()));
    }
    let mut ids: Vec<i64> = train.iter().map(|s| s.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    let images: Vec<Tensor> = train.iter().map(|s| s.image.clone()).collect();
    let maps = parser.map(|p| p.coarse_maps(&images, INFER_BATCH)).transpose()?;
    Ok(ReidDataset {
        labels: train.iter().map(|s| ids.binary_search(&s.identity).unwrap()).collect(),
        images,
        maps,
    })
}

pub fn parse_set<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> ParseDataset {
    let (images, masks) = samples.into_iter().map(|s| (s.image.clone(), s.mask.clone())).unzip();
    ParseDataset { images, masks }
}

/// Images, coarse maps (semantic variants only) and metadata of one split,
/// ready for repeated descriptor extraction.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub images: Vec<Tensor>,
    pub maps: Option<Vec<Tensor>>,
    pub identities: Vec<i64>,
    pub cameras: Vec<u32>,
}

impl EvalSet {
    pub fn from_split(samples: &[Sample], split: Split, parser: Option<&ParserModel>) -> Result<Self> {
        let s: Vec<&Sample> = samples.iter().filter(|x| x.split == split).collect();
        if s.is_empty() {
            return Err(Error::Split(format!("no {} images", split.as_str())));
        }
        let images: Vec<Tensor> = s.iter().map(|x| x.image.clone()).collect();
        let maps = parser.map(|p| p.coarse_maps(&images, INFER_BATCH)).transpose()?;
        Ok(Self {
            images,
            maps,
            identities: s.iter().map(|x| x.identity).collect(),
            cameras: s.iter().map(|x| x.camera).collect(),
        })
    }
}

/// `[n×D]` descriptors of `images` resized to `h×w`.
pub fn describe_all(model: &ReidModel, images: &[Tensor], maps: Option<&[Tensor]>, h: usize, w: usize) -> Result<Tensor> {
    if model.variant().uses_parsing() && maps.is_none() {
        return Err(Error::Parameter(format!("{} needs parse maps", model.variant())));
    }
    let mut out = Vec::with_capacity(images.len() * model.descriptor_dim());
    for start in (0..images.len()).step_by(INFER_BATCH) {
        let end = (start + INFER_BATCH).min(images.len());
        let x = images[start..end].iter().map(|t| bilinear_resize(t, h, w)).collect::<Result<Vec<_>>>()?;
        let m = match maps {
            Some(m) if model.variant().uses_parsing() => Some(Tensor::stack(&m[start..end])?),
            _ => None,
        };
        out.extend_from_slice(model.describe(&Tensor::stack(&x)?, m.as_ref())?.data());
    }
    Tensor::new(&[images.len(), model.descriptor_dim()], out)
}

pub fn describe_set(model: &ReidModel, set: &EvalSet, h: usize, w: usize) -> Result<Tensor> {
    describe_all(model, &set.images, set.maps.as_deref(), h, w)
}

pub fn to_descriptors(model: &ReidModel, matrix: &Tensor, set: &EvalSet) -> Vec<Descriptor> {
    let d = model.descriptor_dim();
    matrix
        .data()
        .chunks_exact(d)
        .zip(set.identities.iter().zip(&set.cameras))
        .map(|(v, (&identity, &camera))| Descriptor {
            vector: v.to_vec(),
            identity,
            camera,
            variant: model.variant(),
        })
        .collect()
}

/// Plain query-vs-gallery evaluation of descriptor matrices.
pub fn evaluate_descriptors(q: &Tensor, g: &Tensor, qs: &EvalSet, gs: &EvalSet, metric: Metric) -> Result<EvalReport> {
    let d = pairwise_distance(q, g, metric)?;
    let mut r = crate::retrieval::evaluate(&d.matrix, &qs.identities, &gs.identities, &qs.cameras, &gs.cameras)?;
    r.settings.metric = Some(metric);
    Ok(r)
}

/// Evaluation after k-reciprocal re-ranking.
pub fn evaluate_reranked(
    q: &Tensor,
    g: &Tensor,
    qs: &EvalSet,
    gs: &EvalSet,
    metric: Metric,
    cfg: &RerankConfig,
) -> Result<EvalReport> {
    let revised = crate::retrieval::k_reciprocal_rerank(q, g, metric, cfg)?;
    let mut r = crate::retrieval::evaluate(&revised, &qs.identities, &gs.identities, &qs.cameras, &gs.cameras)?;
    r.settings.metric = Some(metric);
    r.settings.rerank = Some(*cfg);
    Ok(r)
}

/// Re-ranking from a precomputed `[(q+g)×(q+g)]` matrix, as used by callers
/// that already hold all distances.
pub fn rerank_report(full: &Tensor, qs: &EvalSet, gs: &EvalSet, cfg: &RerankConfig) -> Result<EvalReport> {
    let revised = rerank_distances(full, qs.identities.len(), cfg)?;
    let mut r = crate::retrieval::evaluate(&revised, &qs.identities, &gs.identities, &qs.cameras, &gs.cameras)?;
    r.settings.rerank = Some(*cfg);
    Ok(r)
}

/// ℓ2-normalized concatenation of two models' descriptors, evaluated.
pub fn evaluate_combined(pairs: [(&Tensor, &Tensor); 2], qs: &EvalSet, gs: &EvalSet, metric: Metric) -> Result<EvalReport> {
    let q = combine_descriptors(pairs[0].0, pairs[1].0)?;
    let g = combine_descriptors(pairs[0].1, pairs[1].1)?;
    evaluate_descriptors(&q, &g, qs, gs, metric)
}

/// Parser predictions against ground truth, accumulated over all pixels.
pub fn parser_metrics(parser: &ParserModel, images: &[Tensor], masks: &[LabelMap]) -> Result<ParsingMetrics> {
    Ok(parser_confusion(parser, images, masks)?.metrics())
}

pub fn parser_confusion(parser: &ParserModel, images: &[Tensor], masks: &[LabelMap]) -> Result<ConfusionMatrix> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(Error::dim(format!("{} images for {} masks", images.len(), masks.len())));
    }
    let mut cm = ConfusionMatrix::new(NUM_FINE);
    for (xs, ms) in images.chunks(INFER_BATCH).zip(masks.chunks(INFER_BATCH)) {
        let x = Tensor::stack(xs)?;
        let preds = parser.parser.predict_labels(&parser.params, &x, ms[0].height, ms[0].width)?;
        for (p, m) in preds.iter().zip(ms) {
            cm.add(p, m)?;
        }
    }
    Ok(cm)
}
