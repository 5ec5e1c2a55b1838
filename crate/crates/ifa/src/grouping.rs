//! Intra-frame assembly: center extraction by windowed non-maximum
//! suppression, then grouping every foreground pixel to the center its
//! offset vector points closest to.

use rayon::prelude::*;

use crate::maps::{foreground_mask, FramePrediction, IdentityMap, Mask, OffsetField, ScalarMap};
use crate::{Error, Result};

/// Knobs for center extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingParams {
    /// Side length of the square suppression window, odd.
    pub nms_window: usize,
    /// Minimum heatmap value for a pixel to qualify as a center.
    pub center_threshold: f64,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            nms_window: 41,
            center_threshold: 0.15,
        }
    }
}

impl GroupingParams {
    pub fn validate(&self) -> Result<()> {
        if self.nms_window == 0 || self.nms_window.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "nms_window must be odd and positive, got {}",
                self.nms_window
            )));
        }
        if !self.center_threshold.is_finite() {
            return Err(Error::InvalidParameter(
                "center_threshold must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// A surviving heatmap peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub row: usize,
    pub col: usize,
    /// Heatmap value at the peak.
    pub value: f32,
}

impl Center {
    pub fn pos(&self) -> [f64; 2] {
        [self.row as f64, self.col as f64]
    }
}

/// One instance produced by [`segment_frame`]: its compacted id, the center
/// it was grouped around, and the pixels it owns (linear indices, ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub local_id: u32,
    pub center: Center,
    pub pixels: Vec<u32>,
}

impl InstanceRecord {
    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    pub fn center_pos(&self) -> [f64; 2] {
        self.center.pos()
    }

    pub fn peak_value(&self) -> f64 {
        self.center.value as f64
    }
}

/// True when `p` carries the window maximum and no equal value at a
/// lexicographically smaller position shares the clipped window around `p`.
#[inline]
fn is_window_peak(heat: &ScalarMap, row: usize, col: usize, value: f32, half: usize) -> bool {
    let r0 = row.saturating_sub(half);
    let r1 = (row + half).min(heat.height() - 1);
    let c0 = col.saturating_sub(half);
    let c1 = (col + half).min(heat.width() - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if (r, c) == (row, col) {
                continue;
            }
            let v = heat.get(r, c);
            if v > value || (v == value && (r, c) < (row, col)) {
                return false;
            }
        }
    }
    true
}

/// Finds instance centers: foreground pixels at or above the threshold that
/// hold the maximum of their suppression window (clipped at the borders).
/// Within a plateau of equal maxima only the lexicographically smallest
/// `(row, col)` survives. Sorted by descending value, ties by `(row, col)`.
///
/// Pixels are screened with the 3x3 version of the peak test first, so the
/// cost of the full window check is paid only for actual peak shaped
/// neighborhoods rather than for every pixel.
pub fn extract_centers(
    heatmap: &ScalarMap,
    foreground: &Mask,
    params: &GroupingParams,
) -> Result<Vec<Center>> {
    params.validate()?;
    if (heatmap.height(), heatmap.width()) != (foreground.height(), foreground.width()) {
        return Err(Error::DimensionMismatch(format!(
            "heatmap is {}x{} but the foreground mask is {}x{}",
            heatmap.height(),
            heatmap.width(),
            foreground.height(),
            foreground.width()
        )));
    }
    let half = params.nms_window / 2;
    let screen_half = half.min(1);

    let mut centers: Vec<Center> = (0..heatmap.height())
        .into_par_iter()
        .map(|row| {
            let mut found = Vec::new();
            for col in 0..heatmap.width() {
                if !foreground.get(row, col) {
                    continue;
                }
                let value = heatmap.get(row, col);
                if (value as f64) < params.center_threshold {
                    continue;
                }
                if half > 0 && !is_window_peak(heatmap, row, col, value, screen_half) {
                    continue;
                }
                found.push(Center { row, col, value });
            }
            found
        })
        .flatten_iter()
        .collect();

    if half > 1 {
        centers.retain(|c| is_window_peak(heatmap, c.row, c.col, c.value, half));
    }
    centers.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    Ok(centers)
}

/// Assigns every foreground pixel the 1-based index of the center closest to
/// `pixel + intra_offset`; ties go to the earlier center. Background pixels
/// and frames without centers come out 0.
pub fn group_pixels(
    centers: &[Center],
    intra: &OffsetField,
    foreground: &Mask,
) -> Result<IdentityMap> {
    let (h, w) = (intra.height(), intra.width());
    if (h, w) != (foreground.height(), foreground.width()) {
        return Err(Error::DimensionMismatch(format!(
            "offset field is {h}x{w} but the foreground mask is {}x{}",
            foreground.height(),
            foreground.width()
        )));
    }
    let mut data = vec![0u32; h * w];
    if !centers.is_empty() {
        let points: Vec<[f64; 2]> = centers.iter().map(Center::pos).collect();
        data.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
            for (col, slot) in out.iter_mut().enumerate() {
                if !foreground.get(row, col) {
                    continue;
                }
                let [dr, dc] = intra.get(row, col);
                let wr = row as f64 + dr as f64;
                let wc = col as f64 + dc as f64;
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (m, p) in points.iter().enumerate() {
                    let d = (p[0] - wr).powi(2) + (p[1] - wc).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = m;
                    }
                }
                *slot = best as u32 + 1;
            }
        });
    }
    IdentityMap::new(h, w, data)
}

/// Runs center extraction and grouping on one frame, drops centers that
/// attracted no pixels, and compacts the surviving ids to `1..=M` in center
/// order. Returns the identity map together with one record per instance.
pub fn segment_frame(
    pred: &FramePrediction,
    params: &GroupingParams,
) -> Result<(IdentityMap, Vec<InstanceRecord>)> {
    let fg = foreground_mask(&pred.semantic);
    let centers = extract_centers(&pred.heatmap, &fg, params)?;
    let raw = group_pixels(&centers, &pred.intra, &fg)?;

    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); centers.len() + 1];
    for (i, &id) in raw.data().iter().enumerate() {
        if id != 0 {
            buckets[id as usize].push(i as u32);
        }
    }

    let mut records = Vec::new();
    let mut lut = vec![0u32; centers.len() + 1];
    for (m, center) in centers.iter().enumerate() {
        let pixels = std::mem::take(&mut buckets[m + 1]);
        if pixels.is_empty() {
            continue;
        }
        let local_id = records.len() as u32 + 1;
        lut[m + 1] = local_id;
        records.push(InstanceRecord {
            local_id,
            center: *center,
            pixels,
        });
    }

    let ids = if records.len() == centers.len() {
        raw
    } else {
        let relabeled = raw.data().iter().map(|&id| lut[id as usize]).collect();
        IdentityMap::new(raw.height(), raw.width(), relabeled)?
    };
    Ok((ids, records))
}
