//! Track labeling and scoring.
//!
//! A track's class is decided once, at the end of the sequence, from
//! semantic evidence accumulated over every frame it appeared in. Scores
//! combine how confidently the semantic head supports that class with how
//! strongly the center peak fired.

use std::collections::BTreeMap;

use crate::maps::{IdentityMap, ScalarMap, SemanticProbMap};
use crate::{Error, Result};

/// Mean class-probability vector over the pixels of instance `m`.
pub fn frame_class_evidence(
    semantic: &SemanticProbMap,
    ids: &IdentityMap,
    m: u32,
) -> Result<Vec<f64>> {
    check_same_shape(semantic, ids)?;
    if m == 0 {
        return Err(Error::UnknownInstance(0));
    }
    let k = semantic.num_classes();
    let mut sums = vec![0.0f64; k];
    let mut count = 0usize;
    for (pixel, &id) in ids.data().iter().enumerate() {
        if id == m {
            let probs = semantic.probs_at(pixel);
            for (s, &p) in sums.iter_mut().zip(probs) {
                *s += p as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UnknownInstance(m));
    }
    for s in &mut sums {
        *s /= count as f64;
    }
    Ok(sums)
}

/// Same as [`frame_class_evidence`] but over an explicit pixel list.
pub(crate) fn evidence_from_pixels(semantic: &SemanticProbMap, pixels: &[u32]) -> Vec<f64> {
    let k = semantic.num_classes();
    let mut sums = vec![0.0f64; k];
    if pixels.is_empty() {
        return sums;
    }
    for &pixel in pixels {
        let probs = semantic.probs_at(pixel as usize);
        for (s, &p) in sums.iter_mut().zip(probs) {
            *s += p as f64;
        }
    }
    for s in &mut sums {
        *s /= pixels.len() as f64;
    }
    sums
}

/// Detection-style score for instance `m` in one frame: the mean probability
/// of `class_index` over the instance's pixels times the heatmap value at
/// its center peak.
pub fn instance_score(
    semantic: &SemanticProbMap,
    heatmap: &ScalarMap,
    ids: &IdentityMap,
    m: u32,
    peak: (usize, usize),
    class_index: usize,
) -> Result<f64> {
    check_same_shape(semantic, ids)?;
    if heatmap.height() != ids.height() || heatmap.width() != ids.width() {
        return Err(Error::DimensionMismatch(format!(
            "heatmap is {}x{} but identities are {}x{}",
            heatmap.height(),
            heatmap.width(),
            ids.height(),
            ids.width()
        )));
    }
    if class_index == 0 || class_index >= semantic.num_classes() {
        return Err(Error::InvalidParameter(format!(
            "class {class_index} is not a foreground class (1..{})",
            semantic.num_classes()
        )));
    }
    if peak.0 >= ids.height() || peak.1 >= ids.width() {
        return Err(Error::OutOfBounds {
            row: peak.0 as i64,
            col: peak.1 as i64,
            height: ids.height(),
            width: ids.width(),
        });
    }
    let evidence = frame_class_evidence(semantic, ids, m)?;
    Ok(evidence[class_index] * heatmap.get(peak.0, peak.1) as f64)
}

pub(crate) fn score_from_evidence(evidence: &[f64], peak_value: f64, class_index: usize) -> f64 {
    evidence[class_index] * peak_value
}

/// Final class decision for one track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackLabel {
    pub global_id: u32,
    pub class_index: usize,
    /// Share of the track's accumulated probability mass (background
    /// included) that landed on the winning class.
    pub confidence: f64,
}

#[derive(Debug, Clone)]
struct Observation {
    evidence: Vec<f64>,
    peak_value: f64,
}

/// Per-track semantic evidence and peak values, one observation per frame
/// the track appeared in.
#[derive(Debug, Clone)]
pub struct EvidenceAccumulator {
    num_classes: usize,
    tracks: BTreeMap<u32, Vec<Observation>>,
}

impl EvidenceAccumulator {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need background plus at least one class, got {num_classes}"
            )));
        }
        Ok(Self {
            num_classes,
            tracks: BTreeMap::new(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Records one frame's evidence vector and center-peak value for a track.
    pub fn observe(&mut self, global_id: u32, evidence: Vec<f64>, peak_value: f64) -> Result<()> {
        if global_id == 0 {
            return Err(Error::UnknownInstance(0));
        }
        if evidence.len() != self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "evidence has {} classes, accumulator expects {}",
                evidence.len(),
                self.num_classes
            )));
        }
        if evidence.iter().any(|v| !v.is_finite() || *v < 0.0) || !peak_value.is_finite() {
            return Err(Error::InvalidParameter(
                "evidence and peak values must be finite and non-negative".into(),
            ));
        }
        self.tracks.entry(global_id).or_default().push(Observation {
            evidence,
            peak_value,
        });
        Ok(())
    }

    /// Global ids seen so far, ascending.
    pub fn global_ids(&self) -> Vec<u32> {
        self.tracks.keys().copied().collect()
    }

    pub fn frame_count(&self, global_id: u32) -> usize {
        self.tracks.get(&global_id).map_or(0, Vec::len)
    }

    /// Decides every track's class: evidence vectors are summed over the
    /// track's frames and the strongest non-background class wins, ties
    /// going to the smaller index.
    pub fn finalize_labels(&self) -> Vec<TrackLabel> {
        self.tracks
            .iter()
            .map(|(&global_id, observations)| {
                let mut total = vec![0.0f64; self.num_classes];
                for obs in observations {
                    for (t, v) in total.iter_mut().zip(&obs.evidence) {
                        *t += v;
                    }
                }
                let mut class_index = 1;
                for c in 2..self.num_classes {
                    if total[c] > total[class_index] {
                        class_index = c;
                    }
                }
                let mass: f64 = total.iter().sum();
                let confidence = if mass > 0.0 {
                    total[class_index] / mass
                } else {
                    0.0
                };
                TrackLabel {
                    global_id,
                    class_index,
                    confidence,
                }
            })
            .collect()
    }

    /// Mean per-frame score of a track for a given class.
    pub fn track_score(&self, global_id: u32, class_index: usize) -> Result<f64> {
        if class_index == 0 || class_index >= self.num_classes {
            return Err(Error::InvalidParameter(format!(
                "class {class_index} is not a foreground class (1..{})",
                self.num_classes
            )));
        }
        let observations = self
            .tracks
            .get(&global_id)
            .ok_or(Error::UnknownInstance(global_id))?;
        let sum: f64 = observations
            .iter()
            .map(|obs| score_from_evidence(&obs.evidence, obs.peak_value, class_index))
            .sum();
        Ok(sum / observations.len() as f64)
    }
}

fn check_same_shape(semantic: &SemanticProbMap, ids: &IdentityMap) -> Result<()> {
    if semantic.height() != ids.height() || semantic.width() != ids.width() {
        return Err(Error::DimensionMismatch(format!(
            "semantic map is {}x{} but identities are {}x{}",
            semantic.height(),
            semantic.width(),
            ids.height(),
            ids.width()
        )));
    }
    Ok(())
}
