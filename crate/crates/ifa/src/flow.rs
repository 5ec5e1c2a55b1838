//! Per-instance motion estimates between a target frame and one reference
//! frame, plus the two simpler association strategies kept for comparison.
//!
//! The offset residual `inter(p) - intra(p)` equals `reference center -
//! target center` at every pixel of an instance when the fields are exact,
//! so averaging it over the instance's pixels recovers the instance's motion
//! even when the foreground prediction is incomplete.

use crate::maps::{IdentityMap, OffsetField};
use crate::{Error, Result};

/// IoU a propagated mask must reach to inherit an identity.
pub const IOU_MATCH_THRESHOLD: f64 = 0.5;

/// A center-to-center motion vector and the number of pixels it was
/// averaged over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceFlow {
    pub vector: [f64; 2],
    pub support: usize,
}

fn check_same_size(a_h: usize, a_w: usize, b_h: usize, b_w: usize, what: &str) -> Result<()> {
    if (a_h, a_w) != (b_h, b_w) {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {a_h}x{a_w} vs {b_h}x{b_w}"
        )));
    }
    Ok(())
}

/// Mean offset residual of instance `m`: the average of
/// `inter(p) - intra(p)` over every `stride`-th pixel of the instance in
/// row-major order (the first pixel is always included).
pub fn instance_flow(
    ids: &IdentityMap,
    intra: &OffsetField,
    inter: &OffsetField,
    m: u32,
    stride: usize,
) -> Result<InstanceFlow> {
    if stride == 0 {
        return Err(Error::InvalidParameter(
            "flow stride must be positive".into(),
        ));
    }
    if m == 0 {
        return Err(Error::UnknownInstance(0));
    }
    check_same_size(
        ids.height(),
        ids.width(),
        intra.height(),
        intra.width(),
        "identity map vs intra offsets",
    )?;
    check_same_size(
        ids.height(),
        ids.width(),
        inter.height(),
        inter.width(),
        "identity map vs inter offsets",
    )?;

    let mut sum = [0.0f64; 2];
    let mut support = 0usize;
    let mut seen = 0usize;
    let intra_data = intra.data();
    let inter_data = inter.data();
    for (i, &id) in ids.data().iter().enumerate() {
        if id != m {
            continue;
        }
        if seen.is_multiple_of(stride) {
            let j = i * 2;
            sum[0] += inter_data[j] as f64 - intra_data[j] as f64;
            sum[1] += inter_data[j + 1] as f64 - intra_data[j + 1] as f64;
            support += 1;
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::UnknownInstance(m));
    }
    Ok(InstanceFlow {
        vector: [sum[0] / support as f64, sum[1] / support as f64],
        support,
    })
}

/// Same accumulation as [`instance_flow`], over a precollected row-major
/// pixel list. The pipeline uses this to avoid rescanning the identity map
/// once per (instance, reference) pair.
pub(crate) fn flow_from_pixels(
    pixels: &[u32],
    intra: &OffsetField,
    inter: &OffsetField,
    stride: usize,
) -> InstanceFlow {
    let intra_data = intra.data();
    let inter_data = inter.data();
    let mut sum = [0.0f64; 2];
    let mut support = 0usize;
    for &px in pixels.iter().step_by(stride) {
        let j = px as usize * 2;
        sum[0] += inter_data[j] as f64 - intra_data[j] as f64;
        sum[1] += inter_data[j + 1] as f64 - intra_data[j + 1] as f64;
        support += 1;
    }
    InstanceFlow {
        vector: [sum[0] / support as f64, sum[1] / support as f64],
        support,
    }
}

/// [`flow_avg_baseline`]'s accumulation over a precollected pixel list,
/// with the same stride rule as [`flow_from_pixels`].
pub(crate) fn avg_from_pixels(pixels: &[u32], inter: &OffsetField, stride: usize) -> InstanceFlow {
    let inter_data = inter.data();
    let mut sum = [0.0f64; 2];
    let mut support = 0usize;
    for &px in pixels.iter().step_by(stride) {
        let j = px as usize * 2;
        sum[0] += inter_data[j] as f64;
        sum[1] += inter_data[j + 1] as f64;
        support += 1;
    }
    InstanceFlow {
        vector: [sum[0] / support as f64, sum[1] / support as f64],
        support,
    }
}

/// The ablation baseline that averages the raw inter-frame offsets of
/// instance `m` instead of the residual. Equivalent to "mean pointed-to
/// reference center minus the mask barycenter", so an incomplete or lopsided
/// mask biases the result, which the residual cancels out.
pub fn flow_avg_baseline(ids: &IdentityMap, inter: &OffsetField, m: u32) -> Result<InstanceFlow> {
    if m == 0 {
        return Err(Error::UnknownInstance(0));
    }
    check_same_size(
        ids.height(),
        ids.width(),
        inter.height(),
        inter.width(),
        "identity map vs inter offsets",
    )?;
    let inter_data = inter.data();
    let mut sum = [0.0f64; 2];
    let mut support = 0usize;
    for (i, &id) in ids.data().iter().enumerate() {
        if id != m {
            continue;
        }
        let j = i * 2;
        sum[0] += inter_data[j] as f64;
        sum[1] += inter_data[j + 1] as f64;
        support += 1;
    }
    if support == 0 {
        return Err(Error::UnknownInstance(m));
    }
    Ok(InstanceFlow {
        vector: [sum[0] / support as f64, sum[1] / support as f64],
        support,
    })
}

/// One entry of [`iou_propagation_match`]: a target id and, when some
/// overlap clears the threshold, the winning reference id with that overlap.
pub type OverlapMatch = (u32, Option<(u32, f64)>);

/// The ablation baseline that propagates masks by a per-pixel motion field
/// and matches by overlap against a single reference frame.
///
/// Every pixel of target instance `m` is moved by `motion`, rounded to the
/// nearest pixel, and dropped if it lands outside the image. The instance
/// matches the reference id whose mask has the highest IoU with the warped
/// pixel set, provided that IoU reaches [`IOU_MATCH_THRESHOLD`]; otherwise
/// `None`. Ties go to the smaller reference id. Entries come back keyed by
/// ascending target id, each match carrying its IoU.
///
/// Note the motion argument: the center-pointing inter offsets collapse a
/// mask onto one point if used as a warp directly, so callers propagate with
/// the residual field (inter minus intra), the per-pixel motion estimate.
pub fn iou_propagation_match(
    target_ids: &IdentityMap,
    motion: &OffsetField,
    reference_ids: &IdentityMap,
) -> Result<Vec<OverlapMatch>> {
    let (h, w) = (target_ids.height(), target_ids.width());
    check_same_size(
        h,
        w,
        motion.height(),
        motion.width(),
        "identity map vs motion field",
    )?;
    check_same_size(
        h,
        w,
        reference_ids.height(),
        reference_ids.width(),
        "target vs reference identity map",
    )?;

    let targets = target_ids.instance_ids();
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let index_of: std::collections::BTreeMap<u32, usize> =
        targets.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    // Reference mask sizes.
    let mut ref_sizes: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    for &id in reference_ids.data() {
        if id != 0 {
            *ref_sizes.entry(id).or_insert(0) += 1;
        }
    }

    // Warp every target pixel once, bucketing in-bounds landings per target.
    let motion_data = motion.data();
    let mut warped: Vec<Vec<u32>> = vec![Vec::new(); targets.len()];
    for (i, &id) in target_ids.data().iter().enumerate() {
        if id == 0 {
            continue;
        }
        let (row, col) = (i / w, i % w);
        let j = i * 2;
        let wr = (row as f64 + motion_data[j] as f64).round();
        let wc = (col as f64 + motion_data[j + 1] as f64).round();
        if wr >= 0.0 && wc >= 0.0 && (wr as usize) < h && (wc as usize) < w {
            warped[index_of[&id]].push(wr as u32 * w as u32 + wc as u32);
        }
    }

    let mut out = Vec::with_capacity(targets.len());
    for (i, &m) in targets.iter().enumerate() {
        let set = &mut warped[i];
        set.sort_unstable();
        set.dedup();
        let mut votes: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
        for &px in set.iter() {
            let ref_id = reference_ids.data()[px as usize];
            if ref_id != 0 {
                *votes.entry(ref_id).or_insert(0) += 1;
            }
        }
        let mut best: Option<(u32, f64)> = None;
        for (&n, &inter_count) in &votes {
            let union = set.len() + ref_sizes[&n] - inter_count;
            let iou = inter_count as f64 / union as f64;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((n, iou));
            }
        }
        out.push((m, best.filter(|&(_, iou)| iou >= IOU_MATCH_THRESHOLD)));
    }
    Ok(out)
}
