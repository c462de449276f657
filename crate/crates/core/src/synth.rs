//! Procedural context-dependent segmentation tasks.
//!
//! Every task places an elliptical object on a smooth, slightly noisy
//! background. What makes the object visible differs per task, so a task can
//! only be identified from how foreground relates to its surroundings:
//!
//! * `BRIGHT`  – the object is at least 0.3 brighter than the background
//!   (salient-object analog);
//! * `DARK`    – the underlying content is multiplicatively darkened by at
//!   least 0.3 (shadow analog);
//! * `TEXTURE` – same mean colour as its surroundings, but carrying a
//!   high-frequency stripe texture (camouflage analog);
//! * `EDGE`    – interior identical to the background, delimited only by a
//!   one-pixel outline (transparent-object analog).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CANVAS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    Bright,
    Dark,
    Texture,
    Edge,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::Bright, TaskId::Dark, TaskId::Texture, TaskId::Edge];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Bright => "BRIGHT",
            TaskId::Dark => "DARK",
            TaskId::Texture => "TEXTURE",
            TaskId::Edge => "EDGE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Generator parameters shared by all tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub canvas: usize,
    /// Background base luminance range.
    pub background: (f64, f64),
    /// Additive brightening of BRIGHT objects.
    pub bright_delta: (f64, f64),
    /// Multiplicative factor applied inside DARK objects.
    pub dark_factor: (f64, f64),
    /// TEXTURE stripe amplitude.
    pub texture_amplitude: (f64, f64),
    /// TEXTURE stripe period in pixels (the frequency band).
    pub texture_period: (f64, f64),
    /// Contrast of the EDGE outline.
    pub outline_contrast: f64,
    /// Per-pixel background noise amplitude.
    pub noise: f64,
    /// Accepted mask area as a fraction of the canvas.
    pub area: (f64, f64),
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            canvas: CANVAS,
            background: (0.42, 0.52),
            bright_delta: (0.36, 0.40),
            dark_factor: (0.10, 0.25),
            texture_amplitude: (0.09, 0.13),
            texture_period: (2.5, 4.0),
            outline_contrast: 0.15,
            noise: 0.015,
            area: (0.04, 0.40),
        }
    }
}

/// One task's generator settings and split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub task: TaskId,
    pub params: GeneratorParams,
    pub n_train: usize,
    pub n_test: usize,
    /// Probability that a training scene also contains one object of
    /// another concept, which counts as background for this task. Test
    /// scenes always hold the task's concept alone.
    pub distractor_rate: f64,
    /// Concepts a distractor is drawn from; the task itself is skipped, so
    /// a pool without other concepts disables distractors.
    pub distractors: Vec<TaskId>,
}

impl TaskConfig {
    pub fn new(task: TaskId) -> Self {
        Self {
            task,
            params: GeneratorParams::default(),
            n_train: 64,
            n_test: 32,
            distractor_rate: 0.75,
            distractors: TaskId::ALL.to_vec(),
        }
    }

    /// Concepts of the scene generated from `seed`: the task itself,
    /// possibly followed by one distractor.
    pub fn concepts(&self, seed: u64) -> Vec<TaskId> {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xd157_7ac7));
        let mut concepts = vec![self.task];
        let others: Vec<TaskId> = self.distractors.iter().copied().filter(|&t| t != self.task).collect();
        if rng.gen_bool(self.distractor_rate.clamp(0.0, 1.0)) && !others.is_empty() {
            concepts.push(others[rng.gen_range(0..others.len())]);
        }
        concepts
    }
}

/// A synthetic image with one binary mask per concept present.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]` binary masks keyed by concept.
    pub masks: BTreeMap<TaskId, Tensor<f32>>,
    pub seed: u64,
}

impl SceneSample {
    pub fn mask(&self, task: TaskId) -> Option<&Tensor<f32>> {
        self.masks.get(&task)
    }

    /// Mirror image (and masks) about the vertical axis.
    pub fn hflip(&self) -> SceneSample {
        SceneSample {
            image: hflip(&self.image),
            masks: self.masks.iter().map(|(k, m)| (*k, hflip(m))).collect(),
            seed: self.seed,
        }
    }
}

fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let w = *t.shape().last().expect("rank >= 1");
    let mut out = t.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-sample seed. Distinct indices give distinct seeds.
pub fn sample_seed(base: u64, task: TaskId, index: u64) -> u64 {
    splitmix64(
        splitmix64(base)
            .wrapping_add((task.index() as u64 + 1).wrapping_mul(0x632B_E59B_D9B4_E019))
            .wrapping_add(index),
    )
}

/// Index offset of the test split; train indices are `0..n_train`.
pub const TEST_INDEX_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    fn raster(&self, n: usize) -> Vec<bool> {
        (0..n * n)
            .map(|i| self.contains((i % n) as f64 + 0.5, (i / n) as f64 + 0.5))
            .collect()
    }
}

fn sample_ellipse(rng: &mut ChaCha8Rng, n: usize, area: (f64, f64)) -> Ellipse {
    let canvas = (n * n) as f64;
    let frac = rng.gen_range(area.0..area.1);
    let ratio = rng.gen_range(0.6..1.0);
    let a = (frac * canvas / (PI * ratio)).sqrt();
    let b = a * ratio;
    let margin = a + 1.0;
    let hi = (n as f64 - margin).max(margin + 1e-9);
    Ellipse {
        cx: rng.gen_range(margin..hi),
        cy: rng.gen_range(margin..hi),
        a,
        b,
        angle: rng.gen_range(0.0..PI),
    }
}

/// Renders a scene containing `concepts` from `seed`.
pub fn generate_scene(seed: u64, concepts: &[TaskId], params: &GeneratorParams) -> Result<SceneSample> {
    if concepts.is_empty() {
        return Err(Error::Contract("a scene needs at least one concept".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.canvas;
    let plane = n * n;
    let background = render_background(&mut rng, params);
    let canvas = plane as f64;
    // shrink objects when several must fit side by side
    let hi_frac = (0.30f64).min(0.5 / concepts.len() as f64);
    let area = (params.area.0 + 0.02, hi_frac.max(params.area.0 + 0.03));

    for _attempt in 0..100 {
        let mut image = background.clone();
        let mut masks: Vec<(TaskId, Vec<bool>)> = Vec::new();
        let mut ok = true;
        for &concept in concepts {
            let e = sample_ellipse(&mut rng, n, area);
            let m = e.raster(n);
            let count = m.iter().filter(|&&v| v).count() as f64;
            if count < params.area.0 * canvas || count > params.area.1 * canvas {
                ok = false;
                break;
            }
            let overlaps = masks.iter().any(|(_, other)| {
                let inter = m.iter().zip(other).filter(|(a, b)| **a && **b).count() as f64;
                let other_count = other.iter().filter(|&&v| v).count() as f64;
                inter >= 0.1 * count || inter >= 0.1 * other_count
            });
            if overlaps {
                ok = false;
                break;
            }
            paint(&mut rng, &mut image, &m, concept, params);
            masks.push((concept, m));
        }
        if !ok || !masks.iter().all(|(c, m)| satisfies(&image, m, &masks, *c, n)) {
            continue;
        }
        let image = Tensor::new([3, n, n], image.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())?;
        let masks = masks
            .into_iter()
            .map(|(c, m)| {
                let t = Tensor::new([1, n, n], m.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect());
                t.map(|t| (c, t))
            })
            .collect::<Result<_>>()?;
        return Ok(SceneSample { image, masks, seed });
    }
    Err(Error::Generation(format!(
        "no valid placement for {concepts:?} after 100 attempts (seed {seed})"
    )))
}

fn render_background(rng: &mut ChaCha8Rng, p: &GeneratorParams) -> Vec<f64> {
    let n = p.canvas;
    let base = rng.gen_range(p.background.0..p.background.1);
    let mut out = vec![0.0; 3 * n * n];
    for c in 0..3 {
        let tint = rng.gen_range(-0.03..0.03);
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                let period = rng.gen_range(40.0..90.0);
                let angle = rng.gen_range(0.0..PI);
                (0.015, 2.0 * PI / period, angle, rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        for y in 0..n {
            for x in 0..n {
                let smooth: f64 = waves
                    .iter()
                    .map(|&(amp, k, ang, ph)| amp * (k * (x as f64 * ang.cos() + y as f64 * ang.sin()) + ph).sin())
                    .sum();
                out[(c * n + y) * n + x] = base + tint + smooth + rng.gen_range(-p.noise..p.noise);
            }
        }
    }
    out
}

fn paint(rng: &mut ChaCha8Rng, image: &mut [f64], mask: &[bool], concept: TaskId, p: &GeneratorParams) {
    let n = p.canvas;
    let plane = n * n;
    match concept {
        TaskId::Bright => {
            let delta = rng.gen_range(p.bright_delta.0..p.bright_delta.1);
            for c in 0..3 {
                for i in (0..plane).filter(|&i| mask[i]) {
                    image[c * plane + i] += delta;
                }
            }
        }
        TaskId::Dark => {
            let factor = rng.gen_range(p.dark_factor.0..p.dark_factor.1);
            for c in 0..3 {
                for i in (0..plane).filter(|&i| mask[i]) {
                    image[c * plane + i] *= factor;
                }
            }
        }
        TaskId::Texture => {
            let amp = rng.gen_range(p.texture_amplitude.0..p.texture_amplitude.1);
            let period = rng.gen_range(p.texture_period.0..p.texture_period.1);
            let angle = rng.gen_range(0.0..PI);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let k = 2.0 * PI / period;
            for i in (0..plane).filter(|&i| mask[i]) {
                let (x, y) = ((i % n) as f64, (i / n) as f64);
                let s = (k * (x * angle.cos() + y * angle.sin()) + phase).sin();
                let v = if s >= 0.0 { amp } else { -amp };
                for c in 0..3 {
                    image[c * plane + i] += v;
                }
            }
        }
        TaskId::Edge => {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for i in outline(mask, n) {
                for c in 0..3 {
                    image[c * plane + i] += sign * p.outline_contrast;
                }
            }
        }
    }
}

/// Mask pixels with a 4-neighbour outside the mask (or on the canvas border).
fn outline(mask: &[bool], n: usize) -> Vec<usize> {
    (0..n * n)
        .filter(|&i| {
            if !mask[i] {
                return false;
            }
            let (x, y) = (i % n, i / n);
            x == 0
                || y == 0
                || x == n - 1
                || y == n - 1
                || !mask[i - 1]
                || !mask[i + 1]
                || !mask[i - n]
                || !mask[i + n]
        })
        .collect()
}

fn luminance(image: &[f64], i: usize, plane: usize) -> f64 {
    (image[i] + image[plane + i] + image[2 * plane + i]) / 3.0
}

/// Pixels within `width` (Chebyshev distance) of the mask, outside it.
fn ring(mask: &[bool], n: usize, width: usize) -> Vec<usize> {
    let w = width as isize;
    (0..n * n)
        .filter(|&i| {
            if mask[i] {
                return false;
            }
            let (x, y) = ((i % n) as isize, (i / n) as isize);
            (-w..=w).any(|dy| {
                (-w..=w).any(|dx| {
                    let (xx, yy) = (x + dx, y + dy);
                    xx >= 0 && yy >= 0 && xx < n as isize && yy < n as isize && mask[yy as usize * n + xx as usize]
                })
            })
        })
        .collect()
}

/// Mean square of `x − box3(x)` over the given pixels of the luminance.
pub fn highpass_energy(lum: &[f64], n: usize, pixels: &[usize]) -> f64 {
    let at = |x: isize, y: isize| lum[(y.clamp(0, n as isize - 1) as usize) * n + x.clamp(0, n as isize - 1) as usize];
    let e: f64 = pixels
        .iter()
        .map(|&i| {
            let (x, y) = ((i % n) as isize, (i / n) as isize);
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(x + dx, y + dy);
                }
            }
            let hp = lum[i] - s / 9.0;
            hp * hp
        })
        .sum();
    e / pixels.len().max(1) as f64
}

fn satisfies(image: &[f64], mask: &[bool], all: &[(TaskId, Vec<bool>)], concept: TaskId, n: usize) -> bool {
    let plane = n * n;
    let lum: Vec<f64> = (0..plane).map(|i| luminance(image, i, plane)).collect();
    let mean = |px: &[usize]| px.iter().map(|&i| lum[i]).sum::<f64>() / px.len().max(1) as f64;
    let inside: Vec<usize> = (0..plane).filter(|&i| mask[i]).collect();
    let free: Vec<usize> = (0..plane).filter(|&i| all.iter().all(|(_, m)| !m[i])).collect();
    let near: Vec<usize> = ring(mask, n, 3).into_iter().filter(|&i| all.iter().all(|(_, m)| !m[i])).collect();
    match concept {
        TaskId::Bright => mean(&inside) - mean(&free) >= 0.3,
        TaskId::Dark => mean(&free) - mean(&inside) >= 0.3,
        TaskId::Texture => {
            (mean(&inside) - mean(&near)).abs() < 0.03 && highpass_energy(&lum, n, &inside) >= 3.0 * highpass_energy(&lum, n, &near)
        }
        TaskId::Edge => {
            let border = outline(mask, n);
            let interior: Vec<usize> = inside.iter().copied().filter(|i| !border.contains(i)).collect();
            (mean(&interior) - mean(&near)).abs() < 0.03
        }
    }
}

/// Train/test splits of the scenes of one task.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskId,
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl Dataset {
    /// Images `[n, 3, H, W]` of the listed samples.
    pub fn stack_images(samples: &[&SceneSample]) -> Result<Tensor<f32>> {
        Tensor::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())
    }

    /// Masks `[n, 1, H, W]` of `task` for the listed samples.
    pub fn stack_masks(samples: &[&SceneSample], task: TaskId) -> Result<Tensor<f32>> {
        let masks = samples
            .iter()
            .map(|s| {
                s.mask(task)
                    .ok_or_else(|| Error::Data(format!("sample {} has no {task} mask", s.seed)))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&masks)
    }
}

/// Generates `n_train` training and `n_test` test scenes for a task. The
/// task's concept is present in every scene; training scenes may carry a
/// distractor (see [`TaskConfig::distractor_rate`]).
pub fn make_dataset(cfg: &TaskConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::Config("dataset splits must be non-empty".into()));
    }
    let train = |index: u64| {
        let s = sample_seed(seed, cfg.task, index);
        generate_scene(s, &cfg.concepts(s), &cfg.params)
    };
    let test = |index: u64| generate_scene(sample_seed(seed, cfg.task, TEST_INDEX_OFFSET + index), &[cfg.task], &cfg.params);
    Ok(Dataset {
        task: cfg.task,
        train: (0..cfg.n_train as u64).map(train).collect::<Result<_>>()?,
        test: (0..cfg.n_test as u64).map(test).collect::<Result<_>>()?,
    })
}

fn morph(mask: &Tensor<f32>, k: usize, dilate: bool) -> Result<Tensor<f32>> {
    if k % 2 == 0 {
        return Err(Error::Contract(format!("structuring element must be odd, got {k}")));
    }
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let r = (k / 2) as isize;
    let mut out = mask.clone();
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(mask.data().chunks(h * w)) {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = if dilate { 0.0f32 } else { 1.0 };
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        let inside = yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
                        let v = if inside { src[yy as usize * w + xx as usize] } else { 0.0 };
                        acc = if dilate { acc.max(v) } else { acc.min(v) };
                    }
                }
                dst[y as usize * w + x as usize] = acc;
            }
        }
    }
    Ok(out)
}

/// Morphological dilation with a `k×k` square (max filter, zero border).
pub fn dilate_mask(mask: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    morph(mask, k, true)
}

/// Morphological erosion with a `k×k` square (min filter, zero border).
pub fn erode_mask(mask: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    morph(mask, k, false)
}
