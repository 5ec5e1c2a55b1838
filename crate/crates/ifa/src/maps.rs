//! Dense per-frame prediction maps and the coordinate conventions shared by
//! every stage of the pipeline.
//!
//! Coordinates are `(row, col)` with the origin at the center of the top-left
//! pixel. Offset fields store `(d_row, d_col)` per pixel and always point
//! from the pixel toward a center, so `pixel + offset = center`. Class 0 of
//! the semantic map is background; identity 0 means "no instance".
//!
//! Map payloads are `f32` (matching the on-disk format exactly), while every
//! quantity derived from them is accumulated in `f64`.

use crate::{Error, Result};

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidParameter(format!(
            "map dimensions must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

fn check_len(name: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch(format!(
            "{name} payload has {got} values, expected {expected}"
        )));
    }
    Ok(())
}

fn check_finite(name: &str, data: &[f32]) -> Result<()> {
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "{name} contains a non-finite value"
        )));
    }
    Ok(())
}

/// One real value per pixel. Used for center heatmaps and pixel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        check_len("scalar map", height * width, data.len())?;
        check_finite("scalar map", &data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width]).expect("positive dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// A `(d_row, d_col)` vector per pixel, stored interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl OffsetField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        check_len("offset field", height * width * 2, data.len())?;
        check_finite("offset field", &data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width * 2]).expect("positive dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The `(d_row, d_col)` vector at a pixel.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 2] {
        let i = (row * self.width + col) * 2;
        [self.data[i], self.data[i + 1]]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// A probability distribution over `num_classes` classes per pixel, stored
/// channel-innermost. Class 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProbMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f32>,
}

/// How far a per-pixel distribution may deviate from summing to one.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

impl SemanticProbMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if num_classes == 0 {
            return Err(Error::InvalidParameter(
                "semantic map needs at least one class".into(),
            ));
        }
        check_len("semantic map", height * width * num_classes, data.len())?;
        check_finite("semantic map", &data)?;
        for (pixel, probs) in data.chunks_exact(num_classes).enumerate() {
            if probs.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "semantic map has a negative probability at pixel {pixel}"
                )));
            }
            let sum: f64 = probs.iter().map(|&p| p as f64).sum();
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::InvalidParameter(format!(
                    "semantic map probabilities at pixel {pixel} sum to {sum}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The probability of `class` at a pixel.
    #[inline]
    pub fn get(&self, row: usize, col: usize, class: usize) -> f32 {
        self.data[(row * self.width + col) * self.num_classes + class]
    }

    /// The distribution at a pixel.
    #[inline]
    pub fn probs(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.num_classes;
        &self.data[i..i + self.num_classes]
    }

    /// The distribution at a row-major pixel index.
    #[inline]
    pub fn probs_at(&self, pixel: usize) -> &[f32] {
        let i = pixel * self.num_classes;
        &self.data[i..i + self.num_classes]
    }

    /// The most probable class at a pixel; ties go to the lowest index.
    #[inline]
    pub fn argmax_class(&self, row: usize, col: usize) -> usize {
        argmax(self.probs(row, col))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Per-pixel class indices with 0 as background; shares the identity grid
/// layout.
pub type ClassMap = IdentityMap;

/// Index of the first maximum, so ties break toward the lowest class.
#[inline]
pub(crate) fn argmax(probs: &[f32]) -> usize {
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = k;
        }
    }
    best
}

/// One `u32` label per pixel. Holds instance identities almost everywhere
/// (0 means background); the loss module reuses it for per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl IdentityMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        check_dims(height, width)?;
        check_len("identity map", height * width, data.len())?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0; height * width]).expect("positive dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Distinct nonzero ids, ascending.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&id| id != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// One boolean per pixel; the output of [`foreground_mask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        check_len("mask", height * width, data.len())?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// Everything a single frame contributes to the pipeline: class
/// probabilities, a center heatmap, the intra-frame offsets, and one
/// inter-frame offset field per reference frame (keyed by that frame's
/// index, kept strictly ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub semantic: SemanticProbMap,
    pub heatmap: ScalarMap,
    pub intra: OffsetField,
    inter: Vec<(usize, OffsetField)>,
}

impl FramePrediction {
    pub fn new(
        semantic: SemanticProbMap,
        heatmap: ScalarMap,
        intra: OffsetField,
        inter: Vec<(usize, OffsetField)>,
    ) -> Result<Self> {
        let (h, w) = (semantic.height(), semantic.width());
        let same = |name: &str, mh: usize, mw: usize| -> Result<()> {
            if (mh, mw) != (h, w) {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {mh}x{mw} but the semantic map is {h}x{w}"
                )));
            }
            Ok(())
        };
        same("heatmap", heatmap.height(), heatmap.width())?;
        same("intra offsets", intra.height(), intra.width())?;
        for (r, field) in &inter {
            same(
                &format!("inter offsets for reference {r}"),
                field.height(),
                field.width(),
            )?;
        }
        if inter.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidParameter(
                "inter-frame offsets must be keyed by strictly ascending reference indices".into(),
            ));
        }
        Ok(Self {
            semantic,
            heatmap,
            intra,
            inter,
        })
    }

    pub fn height(&self) -> usize {
        self.semantic.height()
    }

    pub fn width(&self) -> usize {
        self.semantic.width()
    }

    pub fn num_classes(&self) -> usize {
        self.semantic.num_classes()
    }

    /// Reference frame indices with inter-frame offsets, ascending.
    pub fn reference_indices(&self) -> Vec<usize> {
        self.inter.iter().map(|(r, _)| *r).collect()
    }

    pub fn inter_offsets(&self, reference: usize) -> Result<&OffsetField> {
        self.inter
            .iter()
            .find(|(r, _)| *r == reference)
            .map(|(_, f)| f)
            .ok_or(Error::MissingReference(reference))
    }

    pub fn inter(&self) -> &[(usize, OffsetField)] {
        &self.inter
    }
}

/// Where a pixel's offset vector points: `pixel + offset`, in `f64`.
#[inline]
pub fn warp_coordinate(pixel: (usize, usize), field: &OffsetField) -> (f64, f64) {
    let [dr, dc] = field.get(pixel.0, pixel.1);
    (pixel.0 as f64 + dr as f64, pixel.1 as f64 + dc as f64)
}

/// True where the most probable class is not background; ties on the
/// maximum go to the lowest class index, so an exact tie with background
/// stays background.
pub fn foreground_mask(semantic: &SemanticProbMap) -> Mask {
    let k = semantic.num_classes();
    let data = semantic
        .data()
        .chunks_exact(k)
        .map(|probs| argmax(probs) != 0)
        .collect();
    Mask::new(semantic.height(), semantic.width(), data).expect("dimensions come from a valid map")
}
