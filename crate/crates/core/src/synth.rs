//! Procedural "person" images with ground-truth part masks.
//!
//! A person is a stack of axis-aligned bands (hair, face, upper clothes,
//! pants, two shoes) drawn over a camera-specific textured background.
//! Clothing colors come from one shared palette, and background clutter is
//! painted from the same palette, so a descriptor that pools over the whole
//! frame sees clothing-colored distractors. Identities that reuse a color in
//! a different body part are only separable by knowing where the color sits.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, LabelMap};
use crate::error::{Error, Result};
use crate::parsing::FineLabel;
use crate::rng;
use crate::tensor::Tensor;

pub type Rgb = [f64; 3];

/// Clothing colors shared by identities and background clutter.
pub const PALETTE: [Rgb; 10] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.25, 0.85],
    [0.15, 0.7, 0.2],
    [0.9, 0.8, 0.15],
    [0.1, 0.1, 0.1],
    [0.92, 0.92, 0.92],
    [0.6, 0.2, 0.7],
    [0.95, 0.5, 0.1],
    [0.45, 0.3, 0.15],
    [0.2, 0.75, 0.8],
];

const HAIR: [Rgb; 4] = [[0.08, 0.06, 0.05], [0.35, 0.22, 0.1], [0.75, 0.6, 0.3], [0.5, 0.5, 0.5]];
const SKIN: [Rgb; 3] = [[0.95, 0.8, 0.68], [0.78, 0.58, 0.42], [0.45, 0.3, 0.2]];

/// Labels the renderer emits.
pub const USED_LABELS: [FineLabel; 7] = [
    FineLabel::Background,
    FineLabel::Hair,
    FineLabel::Face,
    FineLabel::UpperClothes,
    FineLabel::Pants,
    FineLabel::LeftShoe,
    FineLabel::RightShoe,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_ids: usize,
    pub imgs_per_id: usize,
    pub n_cams: usize,
    /// Identities used for training; the rest are test identities.
    pub train_ids: usize,
    pub height: usize,
    pub width: usize,
    /// Expected share of the background covered by clutter, in [0, 1].
    pub clutter_density: f64,
    pub occlusion_prob: f64,
    /// Scales translation, scale and limb jitter; 0 disables it.
    pub pose_jitter: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_ids: 40,
            imgs_per_id: 12,
            n_cams: 3,
            train_ids: 20,
            height: 128,
            width: 48,
            clutter_density: 0.5,
            occlusion_prob: 0.1,
            pose_jitter: 1.0,
            noise: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_ids < 2 {
            return bad(format!("need at least 2 identities, got {}", self.n_ids));
        }
        if self.n_cams < 2 {
            return bad(format!("need at least 2 cameras, got {}", self.n_cams));
        }
        if self.height < 8 || self.width < 4 {
            return bad(format!("image size {}×{} is too small", self.height, self.width));
        }
        for (name, v) in [("clutter_density", self.clutter_density), ("occlusion_prob", self.occlusion_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.pose_jitter >= 0.0 && self.noise >= 0.0) {
            return bad("pose_jitter and noise must be non-negative".into());
        }
        if self.train_ids > self.n_ids {
            return bad(format!("train_ids {} exceeds n_ids {}", self.train_ids, self.n_ids));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraStyle {
    pub camera: u32,
    pub background: Rgb,
    /// 0 flat, 1 horizontal stripes, 2 vertical stripes, 3 gradient.
    pub texture: u8,
    pub gain: f64,
    pub clutter_density: f64,
    pub occlusion_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPersonSpec {
    pub identity: i64,
    pub hair: Rgb,
    pub skin: Rgb,
    pub upper: Rgb,
    /// Secondary color of horizontally striped tops.
    pub upper_stripe: Option<Rgb>,
    pub lower: Rgb,
    pub shoes: Rgb,
    /// Body width as a fraction of the image width.
    pub body_width: f64,
    /// Body height as a fraction of the image height.
    pub body_height: f64,
    /// Band boundaries as fractions of the body height: hair end, face end,
    /// upper end, pants end (shoes fill the rest).
    pub bands: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: LabelMap,
    pub identity: i64,
    pub camera: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub cameras: Vec<CameraStyle>,
    pub persons: Vec<SyntheticPersonSpec>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub identity: i64,
    pub camera: u32,
    pub split: Split,
}

/// Per-image pose: body placement in pixels plus leg gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub top: f64,
    pub center_x: f64,
    pub height: f64,
    pub width: f64,
    /// Fraction of the pants width left open between the legs.
    pub leg_gap: f64,
}

impl Pose {
    pub fn sample(person: &SyntheticPersonSpec, h: usize, w: usize, jitter: f64, rng: &mut impl Rng) -> Self {
        let (h, w) = (h as f64, w as f64);
        let mut u = |a: f64| if jitter > 0.0 { rng.gen_range(-a..=a) * jitter } else { 0.0 };
        let scale = 1.0 + u(0.08);
        let height = (person.body_height * h * scale).min(h);
        let width = person.body_width * w * scale;
        let slack = h - height;
        let top = (slack / 2.0 + u(slack / 2.0)).clamp(0.0, slack);
        let center_x = w / 2.0 + u(0.12 * w);
        let leg_gap = (0.25 + u(0.08)).max(0.0);
        Self {
            top,
            center_x,
            height,
            width,
            leg_gap,
        }
    }

    /// Fine label of the body at pixel centre `(y, x)`, if the body covers it.
    pub fn label_at(&self, person: &SyntheticPersonSpec, y: usize, x: usize) -> Option<FineLabel> {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let t = (py - self.top) / self.height;
        if !(0.0..1.0).contains(&t) {
            return None;
        }
        let dx = px - self.center_x;
        let half = self.width / 2.0;
        let [hair, face, upper, pants] = person.bands;
        if t < face {
            if dx.abs() >= 0.3 * self.width {
                return None;
            }
            return Some(if t < hair { FineLabel::Hair } else { FineLabel::Face });
        }
        if t < upper {
            return (dx.abs() < half).then_some(FineLabel::UpperClothes);
        }
        let leg_half = 0.85 * half;
        let gap = self.leg_gap * leg_half;
        if dx.abs() >= leg_half {
            return None;
        }
        let legs_split = upper + 0.45 * (pants - upper);
        if t >= legs_split && dx.abs() < gap {
            return None;
        }
        if t < pants {
            return Some(FineLabel::Pants);
        }
        // the person's left foot shows on the image's right
        Some(if dx >= 0.0 { FineLabel::LeftShoe } else { FineLabel::RightShoe })
    }
}

/// One rendered frame: image `[3×H×W]`, fine label mask and the body
/// silhouette before occlusion.
#[derive(Debug, Clone)]
pub struct Render {
    pub image: Tensor,
    pub mask: LabelMap,
    pub silhouette: Vec<bool>,
}

fn jitter_color(c: Rgb, amount: f64, rng: &mut impl Rng) -> Rgb {
    c.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn background_at(cam: &CameraStyle, y: usize, x: usize, h: usize, w: usize, phase: f64) -> Rgb {
    let f = match cam.texture {
        1 => {
            if ((y as f64 + phase) / 6.0) as usize % 2 == 0 {
                1.0
            } else {
                0.8
            }
        }
        2 => {
            if ((x as f64 + phase) / 5.0) as usize % 2 == 0 {
                1.0
            } else {
                0.8
            }
        }
        3 => 0.75 + 0.4 * (y as f64 / h as f64) + 0.1 * (x as f64 / w as f64),
        _ => 1.0,
    };
    cam.background.map(|v| (v * f).min(1.0))
}

/// Draws one frame of `person` seen by `cam`.
pub fn render(
    person: &SyntheticPersonSpec,
    cam: &CameraStyle,
    h: usize,
    w: usize,
    jitter: f64,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<Render> {
    let mut px = vec![[0.0; 3]; h * w];
    let phase = rng.gen_range(0.0..10.0);
    for y in 0..h {
        for x in 0..w {
            px[y * w + x] = background_at(cam, y, x, h, w, phase);
        }
    }
    // clutter: rectangles in clothing colors, about density × frame area in total
    let mut covered = 0.0;
    let target = cam.clutter_density * (h * w) as f64;
    while covered < target {
        let rh = rng.gen_range(0.08..0.3) * h as f64;
        let rw = rng.gen_range(0.15..0.6) * w as f64;
        let y0 = rng.gen_range(-rh / 2.0..h as f64 - rh / 2.0);
        let x0 = rng.gen_range(-rw / 2.0..w as f64 - rw / 2.0);
        let color = jitter_color(*PALETTE.choose(rng).unwrap(), 0.05, rng);
        fill_rect(&mut px, h, w, y0, x0, rh, rw, color);
        covered += rh * rw;
    }

    let pose = Pose::sample(person, h, w, jitter, rng);
    let cj = |c: Rgb, rng: &mut ChaCha8Rng| jitter_color(c, 0.04, rng);
    let mut local = rng::stream(rng.gen(), "render");
    let colors = [
        cj(person.hair, &mut local),
        cj(person.skin, &mut local),
        cj(person.upper, &mut local),
        person.upper_stripe.map_or([0.0; 3], |c| cj(c, &mut local)),
        cj(person.lower, &mut local),
        cj(person.shoes, &mut local),
    ];
    let mut labels = vec![FineLabel::Background.index() as u8; h * w];
    let mut silhouette = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let Some(l) = pose.label_at(person, y, x) else { continue };
            let i = y * w + x;
            silhouette[i] = true;
            labels[i] = l.index() as u8;
            px[i] = match l {
                FineLabel::Hair => colors[0],
                FineLabel::Face => colors[1],
                FineLabel::UpperClothes => {
                    let stripe = ((y as f64 - pose.top) / (0.05 * pose.height)) as usize % 2 == 1;
                    if person.upper_stripe.is_some() && stripe {
                        colors[3]
                    } else {
                        colors[2]
                    }
                }
                FineLabel::Pants => colors[4],
                _ => colors[5],
            };
        }
    }

    if cam.occlusion_prob > 0.0 && rng.gen_bool(cam.occlusion_prob) {
        let rh = rng.gen_range(0.15..0.3) * h as f64;
        let rw = rng.gen_range(0.3..0.6) * w as f64;
        let y0 = h as f64 - rh - rng.gen_range(0.0..0.25) * h as f64;
        let x0 = rng.gen_range(-rw / 3.0..w as f64 - 2.0 * rw / 3.0);
        let color = jitter_color(*PALETTE.choose(rng).unwrap(), 0.05, rng);
        let (ys, xs) = rect_bounds(h, w, y0, x0, rh, rw);
        for y in ys.clone() {
            for x in xs.clone() {
                px[y * w + x] = color;
                labels[y * w + x] = FineLabel::Background.index() as u8;
            }
        }
    }

    let mut data = vec![0.0; 3 * h * w];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            let n = if noise > 0.0 { rng.gen_range(-noise..=noise) * 1.7320508 } else { 0.0 };
            data[c * h * w + i] = (p[c] * cam.gain + n).clamp(0.0, 1.0);
        }
    }
    Ok(Render {
        image: Tensor::new(&[3, h, w], data)?,
        mask: LabelMap::new(h, w, labels)?,
        silhouette,
    })
}

fn rect_bounds(h: usize, w: usize, y0: f64, x0: f64, rh: f64, rw: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let clip = |v: f64, n: usize| v.round().clamp(0.0, n as f64) as usize;
    (clip(y0, h)..clip(y0 + rh, h), clip(x0, w)..clip(x0 + rw, w))
}

#[allow(clippy::too_many_arguments)]
fn fill_rect(px: &mut [Rgb], h: usize, w: usize, y0: f64, x0: f64, rh: f64, rw: f64, color: Rgb) {
    let (ys, xs) = rect_bounds(h, w, y0, x0, rh, rw);
    for y in ys {
        for x in xs.clone() {
            px[y * w + x] = color;
        }
    }
}

fn sample_person(identity: i64, rng: &mut impl Rng) -> SyntheticPersonSpec {
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    colors.shuffle(rng);
    let stripe = rng.gen_bool(0.3).then(|| PALETTE[colors[3]]);
    let hair = rng.gen_range(0.09..0.11);
    let face = hair + rng.gen_range(0.1..0.12);
    let upper = face + rng.gen_range(0.26..0.3);
    let pants = rng.gen_range(0.82..0.84);
    SyntheticPersonSpec {
        identity,
        hair: *HAIR.choose(rng).unwrap(),
        skin: *SKIN.choose(rng).unwrap(),
        upper: PALETTE[colors[0]],
        upper_stripe: stripe,
        lower: PALETTE[colors[1]],
        shoes: PALETTE[colors[2]],
        body_width: rng.gen_range(0.4..0.55),
        body_height: rng.gen_range(0.8..0.92),
        bands: [hair, face, upper, pants],
    }
}

fn sample_camera(camera: u32, cfg: &SynthConfig, rng: &mut impl Rng) -> CameraStyle {
    CameraStyle {
        camera,
        background: [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)],
        texture: rng.gen_range(0..4),
        gain: rng.gen_range(0.75..1.25),
        clutter_density: cfg.clutter_density,
        occlusion_prob: cfg.occlusion_prob,
    }
}

/// Generates the full dataset. Identity `k` keeps id `k`; the first
/// `train_ids` identities in a seeded permutation form the training split.
/// For each test identity the first image from every camera is a query and
/// the rest are gallery images, and every query must have a gallery match
/// under another camera.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    if cfg.imgs_per_id < 2 {
        return Err(Error::Split(format!(
            "{} image(s) per identity cannot be split across cameras",
            cfg.imgs_per_id
        )));
    }
    let mut rng = rng::stream(cfg.seed, rng::DATASET);
    let cameras: Vec<CameraStyle> = (0..cfg.n_cams as u32).map(|c| sample_camera(c, cfg, &mut rng)).collect();
    let persons: Vec<SyntheticPersonSpec> = (0..cfg.n_ids as i64).map(|k| sample_person(k, &mut rng)).collect();
    let mut order: Vec<usize> = (0..cfg.n_ids).collect();
    order.shuffle(&mut rng);
    let mut is_train = vec![false; cfg.n_ids];
    for &k in &order[..cfg.train_ids] {
        is_train[k] = true;
    }

    // camera and split of every image, identity-major
    let mut plan = Vec::with_capacity(cfg.n_ids * cfg.imgs_per_id);
    for k in 0..cfg.n_ids {
        let offset = rng.gen_range(0..cfg.n_cams);
        let cams: Vec<u32> = (0..cfg.imgs_per_id).map(|j| ((j + offset) % cfg.n_cams) as u32).collect();
        let mut seen = vec![false; cfg.n_cams];
        for &c in &cams {
            let split = if is_train[k] {
                Split::Train
            } else if !seen[c as usize] {
                seen[c as usize] = true;
                Split::Query
            } else {
                Split::Gallery
            };
            plan.push((k, c, split));
        }
        if !is_train[k] {
            for &c in cams.iter() {
                let cross = plan
                    .iter()
                    .any(|&(kk, cc, s)| kk == k && cc != c && s == Split::Gallery);
                if !cross {
                    return Err(Error::Split(format!(
                        "identity {k} has no gallery image outside camera {c}; raise imgs_per_id"
                    )));
                }
            }
        }
    }

    let samples = plan
        .par_iter()
        .enumerate()
        .map(|(i, &(k, c, split))| {
            let mut r = rng::stream(cfg.seed, rng::DATASET);
            r.set_word_pos(((i as u128) + 1) << 40);
            let out = render(&persons[k], &cameras[c as usize], cfg.height, cfg.width, cfg.pose_jitter, cfg.noise, &mut r)?;
            Ok(Sample {
                image: out.image,
                mask: out.mask,
                identity: k as i64,
                camera: c,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        config: cfg.clone(),
        cameras,
        persons,
        samples,
    })
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Sorted training identities; position = classifier label.
    pub fn train_identities(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = self.split(Split::Train).map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Writes `images/NNNNN.sprt`, `masks/NNNNN.sprt` and `manifest.jsonl`
    /// under `dir`. Paths in the manifest are relative to `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
        let dir = dir.as_ref();
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let entries: Vec<ManifestEntry> = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let path = PathBuf::from(format!("images/{i:05}.sprt"));
                let mask_path = PathBuf::from(format!("masks/{i:05}.sprt"));
                container::write(dir.join(&path), &s.image)?;
                container::write(dir.join(&mask_path), &s.mask.to_tensor())?;
                Ok(ManifestEntry {
                    path,
                    mask_path: Some(mask_path),
                    identity: s.identity,
                    camera: s.camera,
                    split: s.split,
                })
            })
            .collect::<Result<_>>()?;
        write_manifest(dir.join("manifest.jsonl"), &entries)?;
        Ok(entries)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    crate::output::write_atomic(path, &out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads an image (and mask, when present) named by a manifest entry.
pub fn load_entry(root: impl AsRef<Path>, e: &ManifestEntry) -> Result<(Tensor, Option<LabelMap>)> {
    let root = root.as_ref();
    let image = container::read(root.join(&e.path))?;
    let mask = match &e.mask_path {
        Some(p) => Some(LabelMap::from_tensor(&container::read(root.join(p))?)?),
        None => None,
    };
    Ok((image, mask))
}

/// Every sample listed in `dir/manifest.jsonl`; masks are required.
pub fn load_samples(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    read_manifest(dir.join("manifest.jsonl"))?
        .iter()
        .map(|e| {
            let (image, mask) = load_entry(dir, e)?;
            let mask = mask.ok_or_else(|| Error::Config(format!("{} has no mask", e.path.display())))?;
            Ok(Sample {
                image,
                mask,
                identity: e.identity,
                camera: e.camera,
                split: e.split,
            })
        })
        .collect()
}
