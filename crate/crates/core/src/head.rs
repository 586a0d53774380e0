//! Semantic aggregation head.
//!
//! Backbone activations are pooled once per coarse body region, using the
//! region's spatially ℓ1-normalized probability map as pooling weights. With
//! the spatial axes flattened this is a single matrix product per image:
//!
//! ```text
//! pooled[R×C] = maps[R×HW] · activationsᵀ[HW×C]
//! ```
//!
//! A uniform map (every weight `1/HW`) turns a row into the global average,
//! so the plain global-average-pooling head is the degenerate case.
//!
//! The four part rows (head, upper body, lower body, shoes) are fused by a
//! coordinatewise maximum and concatenated with the foreground row and the
//! global average into the final descriptor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parsing::CoarseRegion;
use crate::tensor::{bilinear_resize, gemm, Tensor};

/// Which descriptor the head assembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Global average pooling only.
    Baseline,
    /// `[fused parts | foreground | global]`
    SpreidWFg,
    /// `[fused parts | global]`
    SpreidWoFg,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SpreidWFg => "spreid_w_fg",
            Variant::SpreidWoFg => "spreid_wo_fg",
        }
    }

    pub fn uses_parsing(self) -> bool {
        self != Variant::Baseline
    }

    pub fn layout(self) -> &'static [Block] {
        match self {
            Variant::Baseline => &[Block::Global],
            Variant::SpreidWFg => &[Block::FusedParts, Block::Foreground, Block::Global],
            Variant::SpreidWoFg => &[Block::FusedParts, Block::Global],
        }
    }

    pub fn descriptor_dim(self, c_feat: usize) -> usize {
        self.layout().len() * c_feat
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "spreid_w_fg" => Ok(Variant::SpreidWFg),
            "spreid_wo_fg" => Ok(Variant::SpreidWoFg),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    FusedParts,
    Foreground,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub variant: Variant,
    /// When false the global-average branch runs on its own backbone copy.
    pub weight_sharing: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SpreidWFg,
            weight_sharing: true,
        }
    }
}

/// An identity embedding with its retrieval metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub vector: Vec<f64>,
    /// `-1` marks a distractor.
    pub identity: i64,
    pub camera: u32,
    pub variant: Variant,
}

/// Weighted pooling.
///
/// Accepts `activations: [C×H×W]` with `maps: [R×H×W]` (returns `[R×C]`), or
/// the batched `[N×C×H×W]` / `[N×R×H×W]` pair (returns `[N×R×C]`).
pub fn weighted_pool(activations: &Tensor, maps: &Tensor) -> Result<Tensor> {
    let (n, c, r, hw) = pool_dims(activations, maps)?;
    let mut out = vec![0.0; n * r * c];
    for b in 0..n {
        let a = &activations.data()[b * c * hw..(b + 1) * c * hw];
        let m = &maps.data()[b * r * hw..(b + 1) * r * hw];
        gemm(r, hw, c, 1.0, m, (hw, 1), a, (1, hw), 0.0, &mut out[b * r * c..(b + 1) * r * c], c);
    }
    let shape = if activations.rank() == 3 { vec![r, c] } else { vec![n, r, c] };
    Ok(Tensor::from_parts(shape, out))
}

/// Returns `(d_activations, d_maps)`.
pub fn weighted_pool_backward(activations: &Tensor, maps: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, r, hw) = pool_dims(activations, maps)?;
    if upstream.len() != n * r * c {
        return Err(Error::dim("weighted_pool upstream shape mismatch"));
    }
    let mut da = vec![0.0; activations.len()];
    let mut dm = vec![0.0; maps.len()];
    for b in 0..n {
        let a = &activations.data()[b * c * hw..(b + 1) * c * hw];
        let m = &maps.data()[b * r * hw..(b + 1) * r * hw];
        let g = &upstream.data()[b * r * c..(b + 1) * r * c];
        // dA[C×HW] = gᵀ[C×R] · M[R×HW]
        gemm(c, r, hw, 1.0, g, (1, c), m, (hw, 1), 0.0, &mut da[b * c * hw..(b + 1) * c * hw], hw);
        // dM[R×HW] = g[R×C] · A[C×HW]
        gemm(r, c, hw, 1.0, g, (c, 1), a, (hw, 1), 0.0, &mut dm[b * r * hw..(b + 1) * r * hw], hw);
    }
    Ok((
        Tensor::from_parts(activations.shape().to_vec(), da),
        Tensor::from_parts(maps.shape().to_vec(), dm),
    ))
}

fn pool_dims(activations: &Tensor, maps: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, ah, aw, r, mh, mw) = match (activations.shape(), maps.shape()) {
        ([c, ah, aw], [r, mh, mw]) => (1, *c, *ah, *aw, *r, *mh, *mw),
        ([n, c, ah, aw], [nm, r, mh, mw]) if n == nm => (*n, *c, *ah, *aw, *r, *mh, *mw),
        (a, m) => {
            return Err(Error::dim(format!(
                "weighted_pool expects matching C×H×W / R×H×W (optionally batched), got {a:?} and {m:?}"
            )))
        }
    };
    if (ah, aw) != (mh, mw) {
        return Err(Error::dim(format!(
            "activations are {ah}×{aw} but maps are {mh}×{mw}; align them first"
        )));
    }
    Ok((n, c, r, ah * aw))
}

/// Bilinearly resizes activations to the probability-map grid.
pub fn align_activations(activations: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    bilinear_resize(activations, target_h, target_w)
}

/// Coordinatewise maximum of the four part descriptors.
pub fn fuse_parts(head: &[f64], upper: &[f64], lower: &[f64], shoes: &[f64]) -> Result<Vec<f64>> {
    let d = head.len();
    if [upper.len(), lower.len(), shoes.len()].iter().any(|&l| l != d) {
        return Err(Error::dim("fuse_parts inputs differ in length"));
    }
    Ok((0..d)
        .map(|i| head[i].max(upper[i]).max(lower[i]).max(shoes[i]))
        .collect())
}

/// Concatenates the blocks of `variant`'s layout.
pub fn assemble_descriptor(global: &[f64], foreground: &[f64], fused: &[f64], variant: Variant) -> Result<Vec<f64>> {
    let c = global.len();
    if variant.uses_parsing() && (foreground.len() != c || fused.len() != c) {
        return Err(Error::dim(format!(
            "{variant} needs equal block sizes, got global {c}, foreground {}, fused {}",
            foreground.len(),
            fused.len()
        )));
    }
    let mut out = Vec::with_capacity(variant.descriptor_dim(c));
    for block in variant.layout() {
        out.extend_from_slice(match block {
            Block::FusedParts => fused,
            Block::Foreground => foreground,
            Block::Global => global,
        });
    }
    Ok(out)
}

/// Row order of the pooled `[R×C]` matrix, matching the coarse map channels.
pub const FOREGROUND_ROW: usize = CoarseRegion::Foreground as usize;
pub const PART_ROWS: std::ops::Range<usize> = (CoarseRegion::Head as usize)..(CoarseRegion::Shoes as usize + 1);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::global_avg_pool;
    use crate::tensor::l1_normalize_spatial;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn per_pixel(acts: &Tensor, maps: &Tensor) -> Tensor {
        let [c, h, w] = *acts.shape() else { unreachable!() };
        let r = maps.shape()[0];
        let mut out = Tensor::zeros(&[r, c]);
        for ri in 0..r {
            for p in 0..h * w {
                for ci in 0..c {
                    out.data_mut()[ri * c + ci] += maps.data()[ri * h * w + p] * acts.data()[ci * h * w + p];
                }
            }
        }
        out
    }

    #[test]
    fn uniform_map_gives_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let acts = Tensor::from_fn(&[4, 3, 5], |_| rng.gen_range(-2.0..2.0));
        let maps = Tensor::full(&[2, 3, 5], 1.0 / 15.0);
        let pooled = weighted_pool(&acts, &maps).unwrap();
        let gap = global_avg_pool(&acts.clone().reshape(&[1, 4, 3, 5]).unwrap()).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                assert!((pooled.data()[r * 4 + c] - gap.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_map_picks_column() {
        let acts = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let mut maps = Tensor::zeros(&[1, 2, 2]);
        maps.data_mut()[3] = 1.0;
        assert_eq!(weighted_pool(&acts, &maps).unwrap().data(), &[3.0, 7.0, 11.0]);
    }

    #[test]
    fn matches_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let acts = Tensor::from_fn(&[4, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let maps = l1_normalize_spatial(&Tensor::from_fn(&[5, 3, 3], |_| rng.gen_range(0.0..1.0))).unwrap();
        let a = weighted_pool(&acts, &maps).unwrap();
        assert!(a.max_abs_diff(&per_pixel(&acts, &maps)) < 1e-12);
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let acts = Tensor::zeros(&[4, 2, 1]);
        let maps = Tensor::zeros(&[5, 16, 6]);
        assert!(weighted_pool(&acts, &maps).is_err());
        let aligned = align_activations(&acts, 16, 6).unwrap();
        assert!(weighted_pool(&aligned, &maps).is_ok());
    }

    #[test]
    fn align_examples() {
        let acts = Tensor::full(&[2, 2, 1], 3.0);
        assert_eq!(align_activations(&acts, 2, 1).unwrap(), acts);
        assert!(align_activations(&acts, 7, 5).unwrap().data().iter().all(|&v| v == 3.0));
        // 2× upscale of a ramp 0,1,2 along x: align corners samples i·2/5
        let ramp = Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 2.0]).unwrap();
        let up = align_activations(&ramp, 1, 6).unwrap();
        for (i, v) in up.data().iter().enumerate() {
            assert!((v - i as f64 * 2.0 / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_examples() {
        let v = [1.0, -2.0, 3.0];
        assert_eq!(fuse_parts(&v, &v, &v, &v).unwrap(), v.to_vec());
        let parts = [[1.0, 5.0], [2.0, 4.0], [0.0, 0.0], [3.0, 1.0]];
        assert_eq!(fuse_parts(&parts[0], &parts[1], &parts[2], &parts[3]).unwrap(), vec![3.0, 5.0]);
        assert_eq!(fuse_parts(&parts[3], &parts[2], &parts[0], &parts[1]).unwrap(), vec![3.0, 5.0]);
        assert!(fuse_parts(&[1.0], &[1.0, 2.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn assemble_examples() {
        let (fused, fg, global) = ([1.0, 2.0], [3.0, 4.0], [5.0, 6.0]);
        assert_eq!(assemble_descriptor(&global, &fg, &fused, Variant::SpreidWFg).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(assemble_descriptor(&global, &fg, &fused, Variant::SpreidWoFg).unwrap(), vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(assemble_descriptor(&global, &fg, &fused, Variant::Baseline).unwrap(), vec![5.0, 6.0]);
        assert!(assemble_descriptor(&global, &[1.0], &fused, Variant::SpreidWFg).is_err());
        assert_eq!(Variant::SpreidWFg.descriptor_dim(64), 192);
        assert_eq!(Variant::SpreidWoFg.descriptor_dim(64), 128);
        assert_eq!(Variant::Baseline.descriptor_dim(64), 64);
    }
}
