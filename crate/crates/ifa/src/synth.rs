//! Deterministic synthetic sequences.
//!
//! Parametric shapes move on straight lines; rasterizing them yields
//! ground-truth identity and class maps plus the ideal prediction maps a
//! perfect network would emit. A separate perturbation stage degrades those
//! maps with a seeded noise model so the assembly stages can be exercised
//! under controlled failure modes.

use rand::distr::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::maps::{
    ClassMap, FramePrediction, IdentityMap, OffsetField, ScalarMap, SemanticProbMap,
};
use crate::matching::ReferencePolicy;
use crate::{Error, Result};

/// Peaks below this heatmap value are invisible to the perturbation stage's
/// peak detector.
pub const PEAK_DETECT_FLOOR: f32 = 0.05;

/// Heatmap value given to injected spurious peaks.
pub const SPURIOUS_PEAK_VALUE: f64 = 0.3;

/// Rendered Gaussians are clipped to zero once they fall below roughly 1e-7.
const GAUSSIAN_TAIL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
}

/// One moving shape. `size` holds the half-extents per axis (a disk with
/// radius 5 is `[5.0, 5.0]`); positions and velocities are (row, col).
/// The shape exists from `birth_frame` through `death_frame` inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub size: [f64; 2],
    pub class_index: usize,
    pub initial: [f64; 2],
    pub velocity: [f64; 2],
    #[serde(default)]
    pub birth_frame: usize,
    pub death_frame: usize,
}

impl ShapeSpec {
    /// Continuous center position at a frame.
    pub fn center_at(&self, frame_index: usize) -> [f64; 2] {
        [
            self.initial[0] + frame_index as f64 * self.velocity[0],
            self.initial[1] + frame_index as f64 * self.velocity[1],
        ]
    }

    pub fn alive_at(&self, frame_index: usize) -> bool {
        self.birth_frame <= frame_index && frame_index <= self.death_frame
    }

    fn contains(&self, center: [f64; 2], row: usize, col: usize) -> bool {
        let dr = row as f64 - center[0];
        let dc = col as f64 - center[1];
        match self.kind {
            ShapeKind::Disk => {
                let a = dr / self.size[0];
                let b = dc / self.size[1];
                a * a + b * b <= 1.0
            }
            ShapeKind::Rectangle => dr.abs() <= self.size[0] && dc.abs() <= self.size[1],
        }
    }
}

/// A full scene: image geometry, cast of shapes, and rendering knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    /// Semantic channels including background; omitted means one past the
    /// largest class in use.
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_heatmap_sigma")]
    pub heatmap_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    pub shapes: Vec<ShapeSpec>,
}

fn default_heatmap_sigma() -> f64 {
    8.0
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.num_frames == 0 {
            return Err(Error::Scene(
                "scene needs positive height, width, and frame count".into(),
            ));
        }
        if !self.heatmap_sigma.is_finite() || self.heatmap_sigma <= 0.0 {
            return Err(Error::Scene(format!(
                "heatmap sigma must be positive, got {}",
                self.heatmap_sigma
            )));
        }
        let k = self.resolved_num_classes();
        if let Some(explicit) = self.num_classes {
            if explicit < 2 {
                return Err(Error::Scene(format!(
                    "num_classes must cover background plus one class, got {explicit}"
                )));
            }
        }
        for (i, shape) in self.shapes.iter().enumerate() {
            if shape.class_index == 0 {
                return Err(Error::Scene(format!("shape {i} uses the background class")));
            }
            if shape.class_index >= k {
                return Err(Error::Scene(format!(
                    "shape {i} has class {} but the scene has {k} classes",
                    shape.class_index
                )));
            }
            if shape.birth_frame > shape.death_frame || shape.death_frame >= self.num_frames {
                return Err(Error::Scene(format!(
                    "shape {i} lifetime {}..={} does not fit {} frames",
                    shape.birth_frame, shape.death_frame, self.num_frames
                )));
            }
            if !shape.size.iter().all(|s| s.is_finite() && *s > 0.0) {
                return Err(Error::Scene(format!("shape {i} has non-positive size")));
            }
            let c = shape.center_at(shape.birth_frame);
            let fits = c[0] - shape.size[0] >= 0.0
                && c[1] - shape.size[1] >= 0.0
                && c[0] + shape.size[0] <= (self.height - 1) as f64
                && c[1] + shape.size[1] <= (self.width - 1) as f64;
            if !fits {
                return Err(Error::Scene(format!(
                    "shape {i} does not fit inside {}x{} at its birth frame",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }

    /// Semantic channel count: explicit, or one past the largest class.
    pub fn resolved_num_classes(&self) -> usize {
        self.num_classes.unwrap_or_else(|| {
            self.shapes
                .iter()
                .map(|s| s.class_index + 1)
                .max()
                .unwrap_or(2)
                .max(2)
        })
    }
}

/// Degradations applied to ideal maps: Gaussian offset noise, center-peak
/// dropout/jitter/spurious injection, one-sided mask erosion, and semantic
/// argmax flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub offset_noise_sigma: f64,
    pub heatmap_jitter: f64,
    pub peak_dropout_prob: f64,
    pub spurious_peak_rate: f64,
    pub mask_erosion: usize,
    pub semantic_flip_prob: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            offset_noise_sigma: 0.0,
            heatmap_jitter: 0.0,
            peak_dropout_prob: 0.0,
            spurious_peak_rate: 0.0,
            mask_erosion: 0,
            semantic_flip_prob: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("offset_noise_sigma", self.offset_noise_sigma),
            ("heatmap_jitter", self.heatmap_jitter),
            ("spurious_peak_rate", self.spurious_peak_rate),
        ];
        for (name, value) in nonneg {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and non-negative, got {value}"
                )));
            }
        }
        for (name, value) in [
            ("peak_dropout_prob", self.peak_dropout_prob),
            ("semantic_flip_prob", self.semantic_flip_prob),
        ] {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be a probability, got {value}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_noop(&self) -> bool {
        self.offset_noise_sigma == 0.0
            && self.heatmap_jitter == 0.0
            && self.peak_dropout_prob == 0.0
            && self.spurious_peak_rate == 0.0
            && self.mask_erosion == 0
            && self.semantic_flip_prob == 0.0
    }
}

/// One ground-truth track: the shape's stable id and class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtTrack {
    pub id: u32,
    pub class_index: usize,
    pub birth_frame: usize,
    pub death_frame: usize,
}

/// Ground truth for a generated sequence: per-frame identity and class maps
/// plus the track table. Identity `i + 1` is shape `i`; occluded or
/// off-image shapes simply have no pixels that frame.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub identities: Vec<IdentityMap>,
    pub classes: Vec<ClassMap>,
    pub tracks: Vec<GtTrack>,
}

struct FrameRaster {
    ids: Vec<u32>,
    classes: Vec<u32>,
    /// Visible pixels per shape, row-major, after occlusion.
    pixels: Vec<Vec<u32>>,
    /// Visible-mask barycenter per shape, when any pixel survives.
    barycenters: Vec<Option<[f64; 2]>>,
}

fn rasterize_frame(spec: &SceneSpec, frame_index: usize) -> FrameRaster {
    let (h, w) = (spec.height, spec.width);
    let mut ids = vec![0u32; h * w];
    let mut classes = vec![0u32; h * w];
    for (i, shape) in spec.shapes.iter().enumerate() {
        if !shape.alive_at(frame_index) {
            continue;
        }
        let center = shape.center_at(frame_index);
        let r0 = (center[0] - shape.size[0]).ceil().max(0.0) as usize;
        let r1 = (center[0] + shape.size[0]).floor().min((h - 1) as f64);
        let c0 = (center[1] - shape.size[1]).ceil().max(0.0) as usize;
        let c1 = (center[1] + shape.size[1]).floor().min((w - 1) as f64);
        if r1 < 0.0 || c1 < 0.0 || r0 as f64 > r1 || c0 as f64 > c1 {
            continue;
        }
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                if shape.contains(center, row, col) {
                    ids[row * w + col] = (i + 1) as u32;
                    classes[row * w + col] = shape.class_index as u32;
                }
            }
        }
    }
    let mut pixels = vec![Vec::new(); spec.shapes.len()];
    for (p, &id) in ids.iter().enumerate() {
        if id != 0 {
            pixels[id as usize - 1].push(p as u32);
        }
    }
    let barycenters = pixels
        .iter()
        .map(|list| {
            if list.is_empty() {
                return None;
            }
            let mut sum = [0.0f64; 2];
            for &p in list {
                sum[0] += (p as usize / w) as f64;
                sum[1] += (p as usize % w) as f64;
            }
            Some([sum[0] / list.len() as f64, sum[1] / list.len() as f64])
        })
        .collect();
    FrameRaster {
        ids,
        classes,
        pixels,
        barycenters,
    }
}

/// Renders `(row, col, value)` peaks as Gaussians of the given sigma,
/// max-combined; tails below about 1e-7 are clipped to zero.
fn render_peaks(height: usize, width: usize, peaks: &[(f64, f64, f64)], sigma: f64) -> ScalarMap {
    let mut data = vec![0.0f32; height * width];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let radius = (sigma * (2.0 * (1.0 / GAUSSIAN_TAIL).ln()).sqrt()).ceil();
    for &(pr, pc, value) in peaks {
        if value <= 0.0 {
            continue;
        }
        let r0 = (pr - radius).ceil().max(0.0) as usize;
        let r1 = ((pr + radius).floor().min((height - 1) as f64)).max(0.0) as usize;
        let c0 = (pc - radius).ceil().max(0.0) as usize;
        let c1 = ((pc + radius).floor().min((width - 1) as f64)).max(0.0) as usize;
        if (pr + radius) < 0.0 || (pc + radius) < 0.0 {
            continue;
        }
        for row in r0..=r1 {
            for col in c0..=c1 {
                let dr = row as f64 - pr;
                let dc = col as f64 - pc;
                let g = value * (-(dr * dr + dc * dc) * inv).exp();
                if g < GAUSSIAN_TAIL {
                    continue;
                }
                let cell = &mut data[row * width + col];
                if g as f32 > *cell {
                    *cell = g as f32;
                }
            }
        }
    }
    ScalarMap::new(height, width, data).expect("finite by construction")
}

/// Generates the ideal prediction maps and ground truth for a scene. Each
/// frame carries inter-frame offsets for exactly the references the policy
/// will ask for. Shapes absent from a reference keep their intra offsets
/// there, so their estimated flow is zero.
pub fn generate_sequence(
    spec: &SceneSpec,
    policy: ReferencePolicy,
) -> Result<(Vec<FramePrediction>, GroundTruth)> {
    spec.validate()?;
    policy.validate()?;
    let k = spec.resolved_num_classes();
    let rasters: Vec<FrameRaster> = (0..spec.num_frames)
        .into_par_iter()
        .map(|t| rasterize_frame(spec, t))
        .collect();

    let frames: Vec<FramePrediction> = (0..spec.num_frames)
        .into_par_iter()
        .map(|t| {
            let raster = &rasters[t];
            let (h, w) = (spec.height, spec.width);

            let mut sem = vec![0.0f32; h * w * k];
            for (p, &class) in raster.classes.iter().enumerate() {
                sem[p * k + class as usize] = 1.0;
            }
            let semantic = SemanticProbMap::new(h, w, k, sem)?;

            let peaks: Vec<(f64, f64, f64)> = raster
                .barycenters
                .iter()
                .filter_map(|b| b.map(|[r, c]| (r, c, 1.0)))
                .collect();
            let heatmap = render_peaks(h, w, &peaks, spec.heatmap_sigma);

            let mut intra = vec![0.0f32; h * w * 2];
            for (m, list) in raster.pixels.iter().enumerate() {
                let Some(bary) = raster.barycenters[m] else {
                    continue;
                };
                for &p in list {
                    let (row, col) = ((p as usize / w) as f64, (p as usize % w) as f64);
                    intra[p as usize * 2] = (bary[0] - row) as f32;
                    intra[p as usize * 2 + 1] = (bary[1] - col) as f32;
                }
            }

            let mut inter = Vec::new();
            for r in policy.select_references(t) {
                let mut field = intra.clone();
                for (m, list) in raster.pixels.iter().enumerate() {
                    let Some(ref_bary) = rasters[r].barycenters[m] else {
                        continue;
                    };
                    if raster.barycenters[m].is_none() {
                        continue;
                    }
                    for &p in list {
                        let (row, col) = ((p as usize / w) as f64, (p as usize % w) as f64);
                        field[p as usize * 2] = (ref_bary[0] - row) as f32;
                        field[p as usize * 2 + 1] = (ref_bary[1] - col) as f32;
                    }
                }
                inter.push((r, OffsetField::new(h, w, field)?));
            }

            FramePrediction::new(semantic, heatmap, OffsetField::new(h, w, intra)?, inter)
        })
        .collect::<Result<Vec<_>>>()?;

    let identities = rasters
        .iter()
        .map(|r| IdentityMap::new(spec.height, spec.width, r.ids.clone()))
        .collect::<Result<Vec<_>>>()?;
    let classes = rasters
        .iter()
        .map(|r| ClassMap::new(spec.height, spec.width, r.classes.clone()))
        .collect::<Result<Vec<_>>>()?;
    let tracks = spec
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| GtTrack {
            id: (i + 1) as u32,
            class_index: s.class_index,
            birth_frame: s.birth_frame,
            death_frame: s.death_frame,
        })
        .collect();

    Ok((
        frames,
        GroundTruth {
            identities,
            classes,
            tracks,
        },
    ))
}

/// A stable per-frame seed derived from a sequence seed.
pub fn derive_frame_seed(seed: u64, frame_index: usize) -> u64 {
    let mut z = seed ^ (frame_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// [`perturb`] over a whole sequence, each frame under its own seed derived
/// from `seed` and the frame index.
pub fn perturb_sequence(
    frames: &[FramePrediction],
    noise: &NoiseSpec,
    heatmap_sigma: f64,
    seed: u64,
) -> Result<Vec<FramePrediction>> {
    frames
        .par_iter()
        .enumerate()
        .map(|(t, pred)| perturb(pred, noise, heatmap_sigma, derive_frame_seed(seed, t)))
        .collect()
}

/// Degrades one frame's maps according to `noise`, deterministically in
/// `seed`. Stages run in a fixed order: offset noise, heatmap rebuild
/// (detect, drop, jitter, inject, re-render at `heatmap_sigma`), mask
/// erosion, semantic flips. Stages whose parameters are all zero are
/// skipped outright, so an all-zero spec returns the input unchanged.
pub fn perturb(
    pred: &FramePrediction,
    noise: &NoiseSpec,
    heatmap_sigma: f64,
    seed: u64,
) -> Result<FramePrediction> {
    noise.validate()?;
    if !heatmap_sigma.is_finite() || heatmap_sigma <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "heatmap sigma must be positive, got {heatmap_sigma}"
        )));
    }
    let (h, w) = (pred.height(), pred.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut intra = pred.intra.data().to_vec();
    let mut inter: Vec<(usize, Vec<f32>)> = pred
        .inter()
        .iter()
        .map(|(r, f)| (*r, f.data().to_vec()))
        .collect();
    if noise.offset_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise.offset_noise_sigma)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for v in &mut intra {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
        }
        for (_, field) in &mut inter {
            for v in field.iter_mut() {
                *v = (*v as f64 + normal.sample(&mut rng)) as f32;
            }
        }
    }

    let rebuild_heatmap = noise.peak_dropout_prob > 0.0
        || noise.heatmap_jitter > 0.0
        || noise.spurious_peak_rate > 0.0;
    let heatmap = if rebuild_heatmap {
        let mut peaks = Vec::new();
        for row in 0..h {
            for col in 0..w {
                let value = pred.heatmap.get(row, col);
                if value >= PEAK_DETECT_FLOOR && is_local_peak(&pred.heatmap, row, col) {
                    peaks.push((row as f64, col as f64, value as f64));
                }
            }
        }
        let mut kept = Vec::with_capacity(peaks.len());
        let dropout = Bernoulli::new(noise.peak_dropout_prob)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let jitter = if noise.heatmap_jitter > 0.0 {
            Some(
                Normal::new(0.0, noise.heatmap_jitter)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?,
            )
        } else {
            None
        };
        for (mut pr, mut pc, value) in peaks {
            if noise.peak_dropout_prob > 0.0 && dropout.sample(&mut rng) {
                continue;
            }
            if let Some(jitter) = &jitter {
                pr += jitter.sample(&mut rng);
                pc += jitter.sample(&mut rng);
            }
            kept.push((pr, pc, value));
        }
        if noise.spurious_peak_rate > 0.0 {
            let background: Vec<usize> = (0..h * w)
                .filter(|&p| crate::maps::argmax(pred.semantic.probs_at(p)) == 0)
                .collect();
            if !background.is_empty() {
                let poisson = Poisson::new(noise.spurious_peak_rate)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                let count = poisson.sample(&mut rng) as usize;
                for _ in 0..count {
                    let p = background[rng.random_range(0..background.len())];
                    kept.push(((p / w) as f64, (p % w) as f64, SPURIOUS_PEAK_VALUE));
                }
            }
        }
        render_peaks(h, w, &kept, heatmap_sigma)
    } else {
        pred.heatmap.clone()
    };

    let k = pred.num_classes();
    let mut sem = pred.semantic.data().to_vec();
    for _ in 0..noise.mask_erosion {
        let argmax: Vec<usize> = (0..h * w)
            .map(|p| crate::maps::argmax(&sem[p * k..p * k + k]))
            .collect();
        for row in 0..h {
            for col in 0..w {
                let p = row * w + col;
                let class = argmax[p];
                if class == 0 {
                    continue;
                }
                let top = row > 0 && argmax[p - w] == class;
                let left = col > 0 && argmax[p - 1] == class;
                if !(top && left) {
                    sem[p * k] += sem[p * k + class];
                    sem[p * k + class] = 0.0;
                }
            }
        }
    }

    if noise.semantic_flip_prob > 0.0 && k > 1 {
        let flip = Bernoulli::new(noise.semantic_flip_prob)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for p in 0..h * w {
            if !flip.sample(&mut rng) {
                continue;
            }
            let probs = &mut sem[p * k..p * k + k];
            let current = crate::maps::argmax(probs);
            let mut other = rng.random_range(0..k - 1);
            if other >= current {
                other += 1;
            }
            probs.swap(current, other);
        }
    }

    FramePrediction::new(
        SemanticProbMap::new(h, w, k, sem)?,
        heatmap,
        OffsetField::new(h, w, intra)?,
        inter
            .into_iter()
            .map(|(r, data)| Ok((r, OffsetField::new(h, w, data)?)))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// 3x3 local maximum; a plateau keeps only its lexicographically first
/// pixel, the same rule the center extractor uses.
fn is_local_peak(heatmap: &ScalarMap, row: usize, col: usize) -> bool {
    let value = heatmap.get(row, col);
    let r0 = row.saturating_sub(1);
    let r1 = (row + 1).min(heatmap.height() - 1);
    let c0 = col.saturating_sub(1);
    let c1 = (col + 1).min(heatmap.width() - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if (r, c) == (row, col) {
                continue;
            }
            let v = heatmap.get(r, c);
            if v > value || (v == value && (r, c) < (row, col)) {
                return false;
            }
        }
    }
    true
}
