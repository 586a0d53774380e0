//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check draws a random configuration, records the layer on a tape and
//! compares the analytic gradient of `Σ r ⊙ output` (for a random `r`) with
//! `(f(θ+ε) − f(θ−ε)) / 2ε` over every input and parameter coordinate.
//! The error of one configuration is
//! `max |analytic − numeric| / max(max |analytic|, max |numeric|)`.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::init_conv;
use crate::error::{Error, Result};
use crate::ops::{pixel_softmax_cross_entropy, softmax_cross_entropy, ConvGeometry, ParamStore, PoolGeometry, Tape, Var};
use crate::parsing::{Aspp, AsppMerge};
use crate::rng;
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Conv,
    MaxPool,
    Relu,
    Gap,
    WeightedPool,
    Resize,
    Aspp,
    PixelClassifier,
    Affine,
    SoftmaxCe,
    PixelCe,
}

impl Layer {
    pub const ALL: [Layer; 11] = [
        Layer::Conv,
        Layer::MaxPool,
        Layer::Relu,
        Layer::Gap,
        Layer::WeightedPool,
        Layer::Resize,
        Layer::Aspp,
        Layer::PixelClassifier,
        Layer::Affine,
        Layer::SoftmaxCe,
        Layer::PixelCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Conv => "conv",
            Layer::MaxPool => "max_pool",
            Layer::Relu => "relu",
            Layer::Gap => "gap",
            Layer::WeightedPool => "weighted_pool",
            Layer::Resize => "resize",
            Layer::Aspp => "aspp",
            Layer::PixelClassifier => "pixel_classifier",
            Layer::Affine => "affine",
            Layer::SoftmaxCe => "softmax_ce",
            Layer::PixelCe => "pixel_ce",
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layer::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer {s:?}")))
    }
}

/// One checked configuration.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub layer: Layer,
    pub config: String,
    pub rel_error: f64,
    pub coordinates: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSummary {
    pub layer: Layer,
    pub configs: usize,
    pub max_rel_error: f64,
    pub worst_config: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub layers: Vec<LayerSummary>,
    pub results: Vec<CheckResult>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    /// Fixed-width table, one row per layer.
    pub fn table(&self) -> String {
        let mut s = format!("{:<18} {:>7} {:>12}  {}\n", "layer", "configs", "max_rel_err", "status");
        for l in &self.layers {
            let status = if l.passed { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{:<18} {:>7} {:>12.3e}  {status}", l.layer.name(), l.configs, l.max_rel_error);
        }
        s
    }
}

/// Relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for inputs that pass through a ReLU.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values 0.01 apart in random order, so no perturbation flips a max.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("shape and length agree")
}

fn randomize_params(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

/// Compares tape gradients of `Σ r ⊙ build(inputs)` against central
/// differences over all inputs and parameters.
fn check_graph(
    params: &ParamStore,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let eval = |params: &ParamStore, inputs: &[Tensor]| -> Result<Tensor> {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    };

    let mut tape = Tape::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let r = uniform(tape.value(out).shape(), -1.0, 1.0, rng);
    let back = tape.backward(out, r.clone())?;
    let project = |y: &Tensor| y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut perturbed = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = back.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = x0 + EPSILON;
            let fp = project(&eval(params, &perturbed)?);
            perturbed[i].data_mut()[j] = x0 - EPSILON;
            let fm = project(&eval(params, &perturbed)?);
            perturbed[i].data_mut()[j] = x0;
            analytic.push(g.data()[j]);
            numeric.push((fp - fm) / (2.0 * EPSILON));
        }
    }
    let mut p = params.clone();
    for id in params.ids() {
        let g = back.params.get(id).cloned().unwrap_or_else(|| Tensor::zeros(params.get(id).shape()));
        for j in 0..params.get(id).len() {
            let x0 = params.get(id).data()[j];
            p.get_mut(id).data_mut()[j] = x0 + EPSILON;
            let fp = project(&eval(&p, inputs)?);
            p.get_mut(id).data_mut()[j] = x0 - EPSILON;
            let fm = project(&eval(&p, inputs)?);
            p.get_mut(id).data_mut()[j] = x0;
            analytic.push(g.data()[j]);
            numeric.push((fp - fm) / (2.0 * EPSILON));
        }
    }
    Ok((relative_error(&analytic, &numeric), analytic.len()))
}

/// Checks a loss function `f(logits) -> (loss, dloss/dlogits)` directly.
fn check_loss(logits: &Tensor, f: impl Fn(&Tensor) -> Result<(f64, Tensor)>) -> Result<(f64, usize)> {
    let (_, grad) = f(logits)?;
    let mut x = logits.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let x0 = x.data()[j];
        x.data_mut()[j] = x0 + EPSILON;
        let fp = f(&x)?.0;
        x.data_mut()[j] = x0 - EPSILON;
        let fm = f(&x)?.0;
        x.data_mut()[j] = x0;
        numeric.push((fp - fm) / (2.0 * EPSILON));
    }
    Ok((relative_error(grad.data(), &numeric), x.len()))
}

/// Stride, dilation and padding combinations covered by the conv check.
pub fn conv_grid() -> Vec<(usize, usize, usize, usize)> {
    let mut grid = Vec::new();
    for kernel in [1, 3, 2] {
        for stride in [1, 2] {
            for dilation in [1, 2, 3] {
                for padding in [0, 1, 2] {
                    grid.push((kernel, stride, dilation, padding));
                }
            }
        }
    }
    grid
}

fn check_one(layer: Layer, index: usize, rng: &mut ChaCha8Rng) -> Result<(String, f64, usize)> {
    let n = rng.gen_range(1..=2);
    let (desc, (err, coords)) = match layer {
        Layer::Conv => {
            let grid = conv_grid();
            let (k, stride, dilation, padding) = grid[index % grid.len()];
            let g = ConvGeometry::new(stride, dilation, padding);
            let span = dilation * (k - 1) + 1;
            let lo = span.saturating_sub(2 * padding).max(1);
            let (h, w) = (rng.gen_range(lo..lo + 5), rng.gen_range(lo..lo + 4));
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let mut store = ParamStore::new();
            let (wt, b) = init_conv(&mut store, "conv", [co, ci, k, k], rng)?;
            randomize_params(&mut store, rng);
            let x = uniform(&[n, ci, h, w], -1.0, 1.0, rng);
            (
                format!("k{k} s{stride} d{dilation} p{padding} {n}x{ci}x{h}x{w}->{co}"),
                check_graph(&store, &[x], |t, v| t.conv2d(v[0], wt, b, g), rng)?,
            )
        }
        Layer::MaxPool => {
            let kernel = rng.gen_range(1..=3);
            let g = PoolGeometry {
                kernel,
                stride: rng.gen_range(1..=2),
                padding: rng.gen_range(0..kernel),
            };
            let c = rng.gen_range(1..=3);
            let (h, w) = (rng.gen_range(kernel..kernel + 5), rng.gen_range(kernel..kernel + 4));
            let x = separated(&[n, c, h, w], rng);
            (
                format!("k{} s{} p{} {n}x{c}x{h}x{w}", g.kernel, g.stride, g.padding),
                check_graph(&ParamStore::new(), &[x], |t, v| t.max_pool(v[0], g), rng)?,
            )
        }
        Layer::Relu => {
            let shape = [n, rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=5)];
            let x = off_zero(&shape, rng);
            (format!("{shape:?}"), check_graph(&ParamStore::new(), &[x], |t, v| Ok(t.relu(v[0])), rng)?)
        }
        Layer::Gap => {
            let shape = [n, rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=6)];
            let x = uniform(&shape, -1.0, 1.0, rng);
            (format!("{shape:?}"), check_graph(&ParamStore::new(), &[x], |t, v| t.global_avg_pool(v[0]), rng)?)
        }
        Layer::WeightedPool => {
            let (c, r, h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=4));
            let a = uniform(&[n, c, h, w], -1.0, 1.0, rng);
            let m = uniform(&[n, r, h, w], 0.0, 1.0, rng);
            (
                format!("{n}x{c}x{h}x{w} maps {r}"),
                check_graph(&ParamStore::new(), &[a, m], |t, v| t.weighted_pool(v[0], v[1]), rng)?,
            )
        }
        Layer::Resize => {
            let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=6));
            let (oh, ow) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
            let x = uniform(&[n, c, h, w], -1.0, 1.0, rng);
            (
                format!("{n}x{c}x{h}x{w} -> {oh}x{ow}"),
                check_graph(&ParamStore::new(), &[x], |t, v| t.resize(v[0], oh, ow), rng)?,
            )
        }
        Layer::Aspp => {
            let merge = if index % 2 == 0 { AsppMerge::Sum } else { AsppMerge::Concat };
            let mut rates = vec![1, 2, 3];
            rates.shuffle(rng);
            rates.truncate(rng.gen_range(1..=3));
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=5));
            let mut store = ParamStore::new();
            let aspp = Aspp::build_into(ci, co, &rates, merge, &mut store, "", rng)?;
            randomize_params(&mut store, rng);
            let x = uniform(&[n, ci, h, w], -1.0, 1.0, rng);
            (
                format!("{merge:?} rates {rates:?} {n}x{ci}x{h}x{w}->{co}"),
                check_graph(&store, &[x], |t, v| aspp.forward(t, v[0]), rng)?,
            )
        }
        Layer::PixelClassifier => {
            let (ci, k) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
            let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let mut store = ParamStore::new();
            let (wt, b) = init_conv(&mut store, "classifier", [k, ci, 1, 1], rng)?;
            randomize_params(&mut store, rng);
            let x = off_zero(&[n, ci, h, w], rng);
            (
                format!("{n}x{ci}x{h}x{w} -> {k} classes"),
                check_graph(
                    &store,
                    &[x],
                    |t, v| {
                        let a = t.relu(v[0]);
                        t.conv2d(a, wt, b, ConvGeometry::new(1, 1, 0))
                    },
                    rng,
                )?,
            )
        }
        Layer::Affine => {
            let (d, k) = (rng.gen_range(1..=8), rng.gen_range(1..=6));
            let mut store = ParamStore::new();
            let wt = store.add("fc.weight", Tensor::zeros(&[k, d]))?;
            let b = store.add("fc.bias", Tensor::zeros(&[k]))?;
            randomize_params(&mut store, rng);
            let x = uniform(&[n + 1, d], -1.0, 1.0, rng);
            (
                format!("{}x{d} -> {k}", n + 1),
                check_graph(&store, &[x], |t, v| t.affine(v[0], wt, b), rng)?,
            )
        }
        Layer::SoftmaxCe => {
            let (b, k) = (rng.gen_range(1..=6), rng.gen_range(2..=8));
            let logits = uniform(&[b, k], -3.0, 3.0, rng);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
            (format!("{b}x{k}"), check_loss(&logits, |x| softmax_cross_entropy(x, &labels))?)
        }
        Layer::PixelCe => {
            let (k, h, w) = (rng.gen_range(2..=5), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let logits = uniform(&[n, k, h, w], -3.0, 3.0, rng);
            let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..h * w).map(|_| rng.gen_range(0..k as u8)).collect()).collect();
            (
                format!("{n}x{k}x{h}x{w}"),
                check_loss(&logits, |x| {
                    let refs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
                    pixel_softmax_cross_entropy(x, &refs)
                })?,
            )
        }
    };
    Ok((desc, err, coords))
}

/// Checks `configs` random configurations of `layer`. The conv check always
/// covers at least the full kernel × stride × dilation × padding grid.
pub fn check_layer(layer: Layer, configs: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(seed, &format!("gradcheck:{}", layer.name()));
    let count = if layer == Layer::Conv { configs.max(conv_grid().len()) } else { configs };
    (0..count)
        .map(|i| {
            let (config, rel_error, coordinates) = check_one(layer, i, &mut rng)?;
            Ok(CheckResult {
                layer,
                config,
                rel_error,
                coordinates,
            })
        })
        .collect()
}

pub fn run(layers: &[Layer], configs: usize, seed: u64) -> Result<GradcheckReport> {
    if configs == 0 {
        return Err(Error::Config("gradcheck needs at least one configuration per layer".into()));
    }
    let start = Instant::now();
    let mut results = Vec::new();
    let mut summaries = Vec::new();
    for &layer in layers {
        let rs = check_layer(layer, configs, seed)?;
        let worst = rs
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .expect("at least one configuration");
        summaries.push(LayerSummary {
            layer,
            configs: rs.len(),
            max_rel_error: worst.rel_error,
            worst_config: worst.config.clone(),
            passed: rs.iter().all(|r| r.rel_error < TOLERANCE),
        });
        results.extend(rs);
    }
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        layers: summaries,
        results,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 1.9]) - 0.05).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of 3x is 3; pretend it is 2
        let (err, _) = check_loss(&Tensor::new(&[1, 1], vec![0.4]).unwrap(), |x| {
            Ok((3.0 * x.data()[0], Tensor::new(&[1, 1], vec![2.0])?))
        })
        .unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn conv_grid_covers_all_geometries() {
        let g = conv_grid();
        assert_eq!(g.len(), 54);
        assert!(g.contains(&(3, 2, 3, 2)));
    }

    #[test]
    fn layer_names_round_trip() {
        for l in Layer::ALL {
            assert_eq!(l.name().parse::<Layer>().unwrap(), l);
        }
        assert!("softmax".parse::<Layer>().is_err());
    }

    #[test]
    fn quick_suite_passes() {
        let r = run(&Layer::ALL, 3, 7).unwrap();
        assert!(r.passed(), "{}", r.table());
    }
}
