//! Nesterov momentum SGD with coupled weight decay, global-norm gradient
//! clipping, a 10-step exponential learning-rate decay and the two-phase
//! (low then high resolution) re-id schedule.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelCheckpoint, Provenance};
use crate::container::LabelMap;
use crate::error::{Error, Result};
use crate::model::{ParserModel, ReidModel};
use crate::ops::{pixel_softmax_cross_entropy, softmax_cross_entropy, Gradients, ParamStore, Tape};
use crate::rng;
use crate::tensor::{bilinear_resize, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 0.0005,
            clip_norm: 2.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// One velocity buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            velocity: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// Scales every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns `g`, the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Parameter(format!("max_norm must be positive, got {max_norm}")));
    }
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter #{}", id.index()),
            });
        }
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// `g̃ = g + wd·p; v ← μv − lr·g̃; p ← p + μv − lr·g̃`. Parameters without a
/// gradient are treated as having gradient zero.
pub fn nesterov_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::dim(format!(
            "optimizer state has {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let v = &mut state.velocity[id.index()];
        let p = params.get_mut(id);
        if v.shape() != p.shape() {
            return Err(Error::dim(format!("velocity shape {:?} vs parameter {:?}", v.shape(), p.shape())));
        }
        let g = grads.get(id);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::dim(format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
        }
        let (mu, wd) = (cfg.momentum, cfg.weight_decay);
        for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gt = g.map_or(0.0, |g| g.data()[i]) + wd * *pv;
            *vv = mu * *vv - lr * gt;
            *pv += mu * *vv - lr * gt;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub steps: usize,
    pub rate: f64,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self { steps: 10, rate: 0.9 }
    }
}

/// `steps` evenly spaced decay iterations `⌊i·total/(steps+1)⌋`, `i = 1..=steps`.
pub fn decay_points(total: usize, steps: usize) -> Result<Vec<usize>> {
    if total < steps + 1 {
        return Err(Error::Config(format!(
            "{total} iterations cannot hold {steps} distinct decay points"
        )));
    }
    Ok((1..=steps).map(|i| i * total / (steps + 1)).collect())
}

/// `base_lr · rate^(number of decay points ≤ iter)`.
pub fn lr_at(iter: usize, total: usize, base_lr: f64, decay: &LrDecay) -> Result<f64> {
    if iter >= total {
        return Err(Error::Parameter(format!("iteration {iter} outside 0..{total}")));
    }
    let passed = decay_points(total, decay.steps)?.iter().filter(|&&p| p <= iter).count();
    Ok(base_lr * decay.rate.powi(passed as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub iterations: usize,
    pub base_lr: f64,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phase1: PhaseSchedule,
    /// Fine-tuning at higher resolution; `iterations = 0` skips it.
    pub phase2: PhaseSchedule,
    pub decay: LrDecay,
    pub batch_size: usize,
}

/// Ratio between the phase-2 and phase-1 input sizes.
pub const PHASE2_SCALE: f64 = 1.52;

impl TrainSchedule {
    /// Phase 2 runs at `PHASE2_SCALE` times the phase-1 size.
    pub fn with_size(height: usize, width: usize) -> Self {
        let up = |v: usize| (v as f64 * PHASE2_SCALE).round() as usize;
        Self {
            phase1: PhaseSchedule {
                iterations: 2000,
                base_lr: 0.01,
                height,
                width,
            },
            phase2: PhaseSchedule {
                iterations: 500,
                base_lr: 0.001,
                height: up(height),
                width: up(width),
            },
            decay: LrDecay::default(),
            batch_size: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.decay.rate > 0.0 && self.decay.rate <= 1.0) {
            return bad(format!("decay rate must be in (0, 1], got {}", self.decay.rate));
        }
        for (i, p) in [&self.phase1, &self.phase2].into_iter().enumerate() {
            if i == 1 && p.iterations == 0 {
                continue;
            }
            decay_points(p.iterations, self.decay.steps)?;
            if !(p.base_lr > 0.0 && p.base_lr.is_finite()) {
                return bad(format!("phase {} base_lr must be positive", i + 1));
            }
            if p.height == 0 || p.width == 0 {
                return bad(format!("phase {} size must be positive", i + 1));
            }
        }
        if self.phase2.iterations > 0
            && (self.phase2.height <= self.phase1.height || self.phase2.width <= self.phase1.width)
        {
            return bad(format!(
                "phase-2 size {}×{} must be strictly larger than phase-1 size {}×{}",
                self.phase2.height, self.phase2.width, self.phase1.height, self.phase1.width
            ));
        }
        Ok(())
    }
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::with_size(128, 48)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: u32,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm_preclip: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("iter,lr,loss,grad_norm_preclip\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.iter, r.lr, r.loss, r.grad_norm_preclip);
    }
    s
}

pub fn write_loss_csv(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    crate::output::write_atomic(path, loss_csv(records).as_bytes())
}

/// Something that produces a mean loss and parameter gradients for a set of
/// sample indices.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn num_samples(&self) -> usize;
    fn loss_and_grad(&self, batch: &[usize]) -> Result<(f64, Gradients)>;
}

/// Endless reshuffled passes over `0..n`.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64, phase: u32) -> Self {
        let mut rng = rng::stream(seed, rng::SHUFFLE);
        rng.set_word_pos((phase as u128) << 64);
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Runs one phase. On a non-finite loss or gradient the parameters are left
/// at the last good iterate and a divergence error is returned.
pub fn run_phase<O: Objective>(
    obj: &mut O,
    phase: u32,
    schedule: &PhaseSchedule,
    decay: &LrDecay,
    batch_size: usize,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<LossRecord>> {
    if obj.num_samples() == 0 {
        return Err(Error::Parameter("empty training set".into()));
    }
    opt.validate()?;
    let mut state = OptimizerState::new(obj.params());
    let mut sampler = BatchSampler::new(obj.num_samples(), seed, phase);
    let mut history = Vec::with_capacity(schedule.iterations);
    for iter in 0..schedule.iterations {
        let lr = lr_at(iter, schedule.iterations, schedule.base_lr, decay)?;
        let batch = sampler.next(batch_size);
        let (loss, mut grads) = obj.loss_and_grad(&batch)?;
        let diverged = |reason: String| Error::Divergence {
            iteration: iter,
            reason,
            last_good: None,
        };
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}")));
        }
        let norm = clip_gradients(&mut grads, opt.clip_norm).map_err(|e| diverged(e.to_string()))?;
        nesterov_step(obj.params_mut(), &grads, &mut state, lr, opt)?;
        history.push(LossRecord {
            phase,
            iter,
            lr,
            loss,
            grad_norm_preclip: norm,
        });
    }
    Ok(history)
}

/// Re-id training data at source resolution. `maps` holds the frozen
/// parser's `[5×h×w]` coarse maps per image, needed by semantic variants.
#[derive(Debug, Clone)]
pub struct ReidDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub maps: Option<Vec<Tensor>>,
}

impl ReidDataset {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::Parameter("empty training set".into()));
        }
        if self.labels.len() != self.images.len() {
            return Err(Error::dim(format!("{} labels for {} images", self.labels.len(), self.images.len())));
        }
        if let Some(m) = &self.maps {
            if m.len() != self.images.len() {
                return Err(Error::dim(format!("{} map sets for {} images", m.len(), self.images.len())));
            }
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Parameter(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(())
    }

    /// Images resized to `h×w`.
    pub fn resized(&self, h: usize, w: usize) -> Result<Vec<Tensor>> {
        self.images.iter().map(|x| bilinear_resize(x, h, w)).collect()
    }
}

struct ReidObjective<'a> {
    model: ReidModel,
    images: Vec<Tensor>,
    labels: &'a [usize],
    maps: Option<&'a [Tensor]>,
}

fn gather(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    Tensor::stack(&idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>())
}

impl Objective for ReidObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn num_samples(&self) -> usize {
        self.images.len()
    }

    fn loss_and_grad(&self, batch: &[usize]) -> Result<(f64, Gradients)> {
        let x = gather(&self.images, batch)?;
        let maps = self.maps.map(|m| gather(m, batch)).transpose()?;
        let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let mut tape = Tape::new(&self.model.params);
        let xv = tape.leaf(x);
        let out = self.model.forward(&mut tape, xv, maps.as_ref())?;
        let (loss, grad) = softmax_cross_entropy(tape.value(out.logits), &labels)?;
        Ok((loss, tape.backward(out.logits, grad)?.params))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    /// One checkpoint per completed phase.
    pub checkpoints: Vec<ModelCheckpoint>,
    pub history: Vec<LossRecord>,
}

fn attach_last_good(e: Error, snapshot: impl FnOnce(usize) -> ModelCheckpoint) -> Error {
    match e {
        Error::Divergence { iteration, reason, .. } => Error::Divergence {
            iteration,
            reason,
            last_good: Some(Box::new(snapshot(iteration))),
        },
        other => other,
    }
}

/// Trains one re-id phase in place of `model`; `phase` is 1 or 2.
pub fn train_reid_phase(
    model: ReidModel,
    data: &ReidDataset,
    phase: u32,
    schedule: &TrainSchedule,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<(ReidModel, ModelCheckpoint, Vec<LossRecord>)> {
    schedule.validate()?;
    data.validate(model.config().num_classes)?;
    if model.variant().uses_parsing() && data.maps.is_none() {
        return Err(Error::Parameter(format!("{} needs parse maps for training", model.variant())));
    }
    let ps = match phase {
        1 => &schedule.phase1,
        2 => &schedule.phase2,
        _ => return Err(Error::Parameter(format!("no phase {phase}"))),
    };
    let mut obj = ReidObjective {
        model,
        images: data.resized(ps.height, ps.width)?,
        labels: &data.labels,
        maps: data.maps.as_deref(),
    };
    let res = run_phase(&mut obj, phase, ps, &schedule.decay, schedule.batch_size, opt, seed);
    let prov = |iteration: usize, loss: f64| Provenance {
        phase,
        iteration,
        seed,
        loss,
    };
    match res {
        Ok(h) => {
            let last = h.last().map_or(f64::NAN, |r| r.loss);
            let ck = ModelCheckpoint::from_reid(&obj.model, prov(ps.iterations, if last.is_finite() { last } else { 0.0 }));
            Ok((obj.model, ck, h))
        }
        Err(e) => Err(attach_last_good(e, |it| ModelCheckpoint::from_reid(&obj.model, prov(it, 0.0)))),
    }
}

/// Phase 1 from the model's current parameters, then phase 2 (if any)
/// starting from the phase-1 result with fresh momentum buffers.
pub fn train_reid(
    model: ReidModel,
    data: &ReidDataset,
    schedule: &TrainSchedule,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainOutcome<ReidModel>> {
    let (model, ck1, mut history) = train_reid_phase(model, data, 1, schedule, opt, seed)?;
    let mut checkpoints = vec![ck1];
    let model = if schedule.phase2.iterations > 0 {
        let (m, ck2, h2) = train_reid_phase(model, data, 2, schedule, opt, seed)?;
        checkpoints.push(ck2);
        history.extend(h2);
        m
    } else {
        model
    };
    Ok(TrainOutcome {
        model,
        checkpoints,
        history,
    })
}

/// Fraction of samples whose arg-max logit equals the label, evaluated at
/// `h×w` in batches.
pub fn classification_accuracy(model: &ReidModel, data: &ReidDataset, h: usize, w: usize, batch: usize) -> Result<f64> {
    data.validate(model.config().num_classes)?;
    let images = data.resized(h, w)?;
    let mut correct = 0;
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = gather(&images, chunk)?;
        let maps = data.maps.as_deref().map(|m| gather(m, chunk)).transpose()?;
        let mut tape = Tape::new(&model.params);
        let xv = tape.leaf(x);
        let out = model.forward(&mut tape, xv, maps.as_ref())?;
        let logits = tape.value(out.logits);
        let k = logits.shape()[1];
        for (row, &i) in logits.data().chunks_exact(k).zip(chunk) {
            let arg = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(arg == data.labels[i]);
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Parser training pairs: images at the parser's input size and label maps
/// at any resolution (logits are upsampled to match).
#[derive(Debug, Clone)]
pub struct ParseDataset {
    pub images: Vec<Tensor>,
    pub masks: Vec<LabelMap>,
}

struct ParserObjective<'a> {
    model: ParserModel,
    images: Vec<Tensor>,
    masks: &'a [LabelMap],
}

impl Objective for ParserObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn num_samples(&self) -> usize {
        self.images.len()
    }

    fn loss_and_grad(&self, batch: &[usize]) -> Result<(f64, Gradients)> {
        let x = gather(&self.images, batch)?;
        let (mh, mw) = (self.masks[batch[0]].height, self.masks[batch[0]].width);
        let labels: Vec<&[u8]> = batch.iter().map(|&i| self.masks[i].labels.as_slice()).collect();
        let mut tape = Tape::new(&self.model.params);
        let xv = tape.leaf(x);
        let logits = self.model.parser.forward(&mut tape, xv)?;
        let up = tape.resize(logits, mh, mw)?;
        let (loss, grad) = pixel_softmax_cross_entropy(tape.value(up), &labels)?;
        Ok((loss, tape.backward(up, grad)?.params))
    }
}

/// Single-phase parser training with the same optimizer and decay rules.
pub fn train_parser(
    model: ParserModel,
    data: &ParseDataset,
    schedule: &PhaseSchedule,
    decay: &LrDecay,
    batch_size: usize,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainOutcome<ParserModel>> {
    if data.images.is_empty() || data.images.len() != data.masks.len() {
        return Err(Error::dim(format!("{} images for {} masks", data.images.len(), data.masks.len())));
    }
    let (mh, mw) = (data.masks[0].height, data.masks[0].width);
    if data.masks.iter().any(|m| (m.height, m.width) != (mh, mw)) {
        return Err(Error::dim("parser masks must share one size"));
    }
    decay_points(schedule.iterations, decay.steps)?;
    let (h, w) = (model.config().input_h, model.config().input_w);
    let mut obj = ParserObjective {
        images: data.images.iter().map(|x| bilinear_resize(x, h, w)).collect::<Result<_>>()?,
        model,
        masks: &data.masks,
    };
    let prov = |iteration: usize, loss: f64| Provenance {
        phase: 1,
        iteration,
        seed,
        loss,
    };
    match run_phase(&mut obj, 1, schedule, decay, batch_size, opt, seed) {
        Ok(h) => {
            let last = h.last().map_or(0.0, |r| r.loss);
            let ck = ModelCheckpoint::from_parser(&obj.model, prov(schedule.iterations, last));
            Ok(TrainOutcome {
                model: obj.model,
                checkpoints: vec![ck],
                history: h,
            })
        }
        Err(e) => Err(attach_last_good(e, |it| ModelCheckpoint::from_parser(&obj.model, prov(it, 0.0)))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn store(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in values {
            s.add(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn lr_schedule_examples() {
        let d = LrDecay::default();
        assert_eq!(lr_at(0, 2000, 0.01, &d).unwrap(), 0.01);
        let p = decay_points(2000, 10).unwrap();
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert!((lr_at(p[0], 2000, 0.01, &d).unwrap() - 0.009).abs() < 1e-15);
        assert!((lr_at(p[0] - 1, 2000, 0.01, &d).unwrap() - 0.01).abs() < 1e-15);
        let last = lr_at(1999, 2000, 0.01, &d).unwrap();
        assert!((last - 0.0034867844).abs() < 1e-9);
        assert!(lr_at(2000, 2000, 0.01, &d).is_err());
    }

    #[test]
    fn lr_takes_eleven_values_and_never_increases() {
        for total in [11, 37, 300, 2000] {
            let lrs: Vec<f64> = (0..total).map(|i| lr_at(i, total, 0.01, &LrDecay::default()).unwrap()).collect();
            assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            let mut distinct = lrs.clone();
            distinct.dedup();
            assert_eq!(distinct.len(), 11, "total {total}");
        }
        assert!(decay_points(10, 10).is_err());
    }

    #[test]
    fn clipping_examples() {
        let ps = store(&[("a", Tensor::zeros(&[2]))]);
        let id = ps.id_of("a").unwrap();
        let mut g = Gradients::empty(1);
        g.set(id, Tensor::new(&[2], vec![0.6, 0.8]).unwrap());
        assert_eq!(clip_gradients(&mut g, 2.0).unwrap(), 1.0);
        assert_eq!(g.get(id).unwrap().data(), &[0.6, 0.8]);
        g.set(id, Tensor::new(&[2], vec![2.4, 3.2]).unwrap());
        assert!((clip_gradients(&mut g, 2.0).unwrap() - 4.0).abs() < 1e-12);
        let d = g.get(id).unwrap().data();
        assert!((d[0] - 1.2).abs() < 1e-12 && (d[1] - 1.6).abs() < 1e-12);
        assert!((g.global_norm() - 2.0).abs() < 1e-12);
        g.set(id, Tensor::from_parts(vec![2], vec![f64::NAN, 0.0]));
        assert!(matches!(clip_gradients(&mut g, 2.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn clipping_matches_two_pass_reference() {
        let mut rng = rng::stream(3, "clip");
        for _ in 0..50 {
            let shapes = [vec![3, 2], vec![5], vec![2, 2, 2]];
            let mut ps = ParamStore::new();
            let mut g = Gradients::empty(3);
            for (i, s) in shapes.iter().enumerate() {
                let id = ps.add(format!("p{i}"), Tensor::zeros(s)).unwrap();
                g.set(id, Tensor::from_fn(s, |_| rng.gen_range(-2.0..2.0)));
            }
            let flat: Vec<f64> = g.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
            let sq: f64 = flat.iter().map(|v| v * v).sum();
            let norm = sq.sqrt();
            let scale = if norm > 2.0 { 2.0 / norm } else { 1.0 };
            let n = clip_gradients(&mut g, 2.0).unwrap();
            assert_eq!(n, norm);
            let after: Vec<f64> = g.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
            for (a, b) in after.iter().zip(&flat) {
                assert_eq!(*a, b * scale);
            }
            assert!(g.global_norm() <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn nesterov_examples() {
        let mut ps = store(&[("p", Tensor::scalar(1.0))]);
        let mut st = OptimizerState::new(&ps);
        let cfg0 = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        nesterov_step(&mut ps, &Gradients::empty(1), &mut st, 0.01, &cfg0).unwrap();
        assert_eq!(ps.get(ps.id_of("p").unwrap()).data(), &[1.0]);

        nesterov_step(&mut ps, &Gradients::empty(1), &mut st, 0.01, &OptimizerConfig::default()).unwrap();
        let id = ps.id_of("p").unwrap();
        assert!((st.velocity()[0].data()[0] + 5e-6).abs() < 1e-18);
        let expected = 1.0 + 0.9 * -5e-6 - 0.01 * 0.0005;
        assert!((ps.get(id).data()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.9999905).abs() < 1e-12);
    }

    #[test]
    fn nesterov_matches_recurrence() {
        let (mu, wd, lr, g) = (0.9, 0.0005, 0.05, 0.3);
        let mut ps = store(&[("p", Tensor::scalar(2.0))]);
        let id = ps.id_of("p").unwrap();
        let mut st = OptimizerState::new(&ps);
        let mut grads = Gradients::empty(1);
        grads.set(id, Tensor::scalar(g));
        let (mut p, mut v) = (2.0f64, 0.0f64);
        for _ in 0..2 {
            nesterov_step(&mut ps, &grads, &mut st, lr, &OptimizerConfig::default()).unwrap();
            let gt = g + wd * p;
            v = mu * v - lr * gt;
            p = p + mu * v - lr * gt;
        }
        assert!((ps.get(id).data()[0] - p).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut ps = store(&[("p", Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap())]);
        let before = ps.clone();
        let mut st = OptimizerState::new(&ps);
        let mut g = Gradients::empty(1);
        g.set(ps.id_of("p").unwrap(), Tensor::full(&[3], 1.0));
        for _ in 0..3 {
            nesterov_step(&mut ps, &g, &mut st, 0.0, &OptimizerConfig::default()).unwrap();
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn sampler_is_deterministic_and_covers_epochs() {
        let mut a = BatchSampler::new(7, 1, 1);
        let mut b = BatchSampler::new(7, 1, 1);
        let xa: Vec<usize> = (0..3).flat_map(|_| a.next(7)).collect();
        let xb: Vec<usize> = (0..3).flat_map(|_| b.next(7)).collect();
        assert_eq!(xa, xb);
        for epoch in xa.chunks(7) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, (0..7).collect::<Vec<_>>());
        }
        let mut c = BatchSampler::new(7, 1, 2);
        assert_ne!(c.next(7), xa[..7].to_vec());
    }

    #[test]
    fn schedule_validation() {
        let s = TrainSchedule::default();
        s.validate().unwrap();
        assert_eq!((s.phase2.height, s.phase2.width), (195, 73));
        let mut bad = s.clone();
        bad.phase2.width = bad.phase1.width;
        assert!(bad.validate().is_err());
        let mut bad = s.clone();
        bad.phase1.iterations = 5;
        assert!(bad.validate().is_err());
        let mut ok = s;
        ok.phase2.iterations = 0;
        ok.validate().unwrap();
    }

    #[test]
    fn loss_csv_header() {
        let csv = loss_csv(&[LossRecord {
            phase: 1,
            iter: 0,
            lr: 0.01,
            loss: 1.5,
            grad_norm_preclip: 3.0,
        }]);
        assert_eq!(csv, "iter,lr,loss,grad_norm_preclip\n0,0.01,1.5,3\n");
    }
}
