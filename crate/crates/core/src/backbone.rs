//! A small convolutional backbone with the usual classification-network
//! skeleton: a stride-8 stem (two stride-2 convolutions and a stride-2 max
//! pool), then three stages of convolutions separated by two stride-2 grid
//! reductions, for an output stride of 32.
//!
//! The stride-16 variant used for dense prediction keeps every parameter and
//! only reinterprets the network: the last grid reduction runs at stride 1
//! and every convolution after it samples with dilation 2, so each unit sees
//! the same input pattern it was trained on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ConvGeometry, ParamId, ParamStore, PoolGeometry, Tape, Var};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Output channels of the two stride-2 stem convolutions.
    pub stem_channels: Vec<usize>,
    /// Output channels of each stage; a grid reduction sits between stages.
    pub block_channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub kernel_size: usize,
    pub output_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            stem_channels: vec![8, 16],
            block_channels: vec![32, 48, 64],
            convs_per_stage: 2,
            kernel_size: 3,
            output_stride: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stem_channels.len() != 2 {
            return bad(format!("stem needs exactly 2 convolutions, got {}", self.stem_channels.len()));
        }
        if self.block_channels.len() != 3 {
            return bad(format!("backbone needs exactly 3 stages, got {}", self.block_channels.len()));
        }
        if self.convs_per_stage == 0 {
            return bad("convs_per_stage must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !matches!(self.output_stride, 16 | 32) {
            return bad(format!("output_stride must be 16 or 32, got {}", self.output_stride));
        }
        if self.input_channels == 0 || self.stem_channels.iter().chain(&self.block_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.block_channels.last().unwrap_or(&0)
    }

    /// `ceil(len / output_stride)`
    pub fn feature_extent(&self, len: usize) -> usize {
        len.div_ceil(self.output_stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Convolution followed by ReLU.
    Conv {
        name: String,
        weight: ParamId,
        bias: ParamId,
        geometry: ConvGeometry,
    },
    MaxPool(PoolGeometry),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<Layer>,
    /// Index into `layers` of the last grid reduction.
    last_reduction: usize,
}

/// He-uniform (fan-in scaled) convolution weights and zero biases.
pub(crate) fn init_conv(
    store: &mut ParamStore,
    name: &str,
    shape: [usize; 4],
    rng: &mut impl Rng,
) -> Result<(ParamId, ParamId)> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let bound = (6.0 / fan_in as f64).sqrt();
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound));
    let weight = store.add(format!("{name}.weight"), w)?;
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?;
    Ok((weight, bias))
}

impl Backbone {
    /// Adds the backbone's parameters to `store` under `prefix`.
    pub fn build_into(
        config: &BackboneConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let os16 = config.output_stride == 16;
        let mut layers = Vec::new();
        let mut cin = config.input_channels;
        let mut conv = |layers: &mut Vec<Layer>, name: String, cin: usize, cout: usize, g: ConvGeometry| -> Result<()> {
            let (weight, bias) = init_conv(store, &format!("{prefix}{name}"), [cout, cin, k, k], rng)?;
            layers.push(Layer::Conv {
                name,
                weight,
                bias,
                geometry: g,
            });
            Ok(())
        };
        for (i, &c) in config.stem_channels.iter().enumerate() {
            conv(&mut layers, format!("stem.conv{}", i + 1), cin, c, ConvGeometry::same(k, 2, 1))?;
            cin = c;
        }
        layers.push(Layer::MaxPool(PoolGeometry {
            kernel: 3,
            stride: 2,
            padding: 1,
        }));
        let n_stages = config.block_channels.len();
        let mut last_reduction = 0;
        for (s, &c) in config.block_channels.iter().enumerate() {
            let after_last = os16 && s == n_stages - 1;
            if s > 0 {
                let is_last = s == n_stages - 1;
                let stride = if is_last && os16 { 1 } else { 2 };
                last_reduction = layers.len();
                conv(&mut layers, format!("reduce{s}"), cin, c, ConvGeometry::same(k, stride, 1))?;
                cin = c;
            }
            let dil = if after_last { 2 } else { 1 };
            for j in 0..config.convs_per_stage {
                conv(&mut layers, format!("stage{}.conv{}", s + 1, j + 1), cin, c, ConvGeometry::same(k, 1, dil))?;
                cin = c;
            }
        }
        Ok(Self {
            config: config.clone(),
            layers,
            last_reduction,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels()
    }

    pub fn output_stride(&self) -> usize {
        self.config.output_stride
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv { weight, bias, .. } => vec![*weight, *bias],
                Layer::MaxPool(_) => vec![],
            })
            .collect()
    }

    /// Records the feature extractor on `tape`: `[N×3×H×W] → [N×C×⌈H/os⌉×⌈W/os⌉]`.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let s = tape.value(images).shape();
        if s.len() != 4 || s[1] != self.config.input_channels {
            return Err(Error::dim(format!(
                "backbone expects N×{}×H×W images, got {s:?}",
                self.config.input_channels
            )));
        }
        let mut x = images;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { weight, bias, geometry, .. } => {
                    let c = tape.conv2d(x, *weight, *bias, *geometry)?;
                    tape.relu(c)
                }
                Layer::MaxPool(g) => tape.max_pool(x, *g)?,
            };
        }
        Ok(x)
    }

    /// Inference-only convenience wrapper around [`Backbone::forward`].
    pub fn features(&self, params: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(params);
        let x = tape.leaf(images.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Reinterprets an output-stride-32 network as output stride 16. The
    /// returned network references the same parameters.
    pub fn to_os16(&self) -> Result<Self> {
        if self.config.output_stride != 32 {
            return Err(Error::Config("backbone already has output stride 16".into()));
        }
        let mut out = self.clone();
        out.config.output_stride = 16;
        let k = self.config.kernel_size;
        for (i, layer) in out.layers.iter_mut().enumerate() {
            if let Layer::Conv { geometry, .. } = layer {
                if i == self.last_reduction {
                    *geometry = ConvGeometry::same(k, 1, 1);
                } else if i > self.last_reduction {
                    *geometry = ConvGeometry::same(k, 1, 2);
                }
            }
        }
        Ok(out)
    }
}

/// Builds a backbone with its own parameter store, initialized from the
/// `init:reid` stream of `seed`.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = rng::stream(seed, rng::INIT_REID);
    let net = Backbone::build_into(config, &mut store, "", &mut rng)?;
    Ok((net, store))
}

/// Stand-alone form of [`Backbone::to_os16`].
pub fn convert_to_os16(net: &Backbone) -> Result<Backbone> {
    net.to_os16()
}
