//! The per-frame assembly loop: segment the frame into instances, estimate
//! each instance's motion toward the reference frames, carry identities
//! across, and accumulate class evidence until the sequence ends.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::flow::{avg_from_pixels, flow_from_pixels, iou_propagation_match};
use crate::grouping::{segment_frame, GroupingParams, InstanceRecord};
use crate::labeling::{evidence_from_pixels, EvidenceAccumulator};
use crate::maps::{FramePrediction, IdentityMap, OffsetField};
use crate::matching::{
    match_instances, MatchDecision, MatchingParams, TargetInstance, TrackerState,
};
use crate::{Error, Result};

/// How identities are carried from a reference frame to the current one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowMethod {
    /// Warp each instance's center by its mean offset residual (inter minus
    /// intra) and match centers within epsilon.
    #[default]
    Residual,
    /// Like `Residual`, but the motion estimate is the mean raw inter-frame
    /// offset without subtracting the intra-frame part.
    Avg,
    /// Skip center matching: warp the instance's pixels by the per-pixel
    /// offset residuals and inherit the reference identity they overlap
    /// best, if the overlap is strong enough.
    Iou,
}

impl std::fmt::Display for FlowMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlowMethod::Residual => "residual",
            FlowMethod::Avg => "avg",
            FlowMethod::Iou => "iou",
        })
    }
}

impl std::str::FromStr for FlowMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(FlowMethod::Residual),
            "avg" => Ok(FlowMethod::Avg),
            "iou" => Ok(FlowMethod::Iou),
            other => Err(Error::InvalidParameter(format!(
                "unknown flow method {other:?}, expected residual, avg, or iou"
            ))),
        }
    }
}

/// Everything the pipeline needs to know besides the frames themselves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineParams {
    pub grouping: GroupingParams,
    pub matching: MatchingParams,
    pub flow_method: FlowMethod,
}

impl PipelineParams {
    /// Defaults with the matching threshold scaled to the image diagonal.
    pub fn for_image(height: usize, width: usize) -> Self {
        Self {
            grouping: GroupingParams::default(),
            matching: MatchingParams::for_image(height, width),
            flow_method: FlowMethod::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grouping.validate()?;
        self.matching.validate()
    }
}

/// One finished track: its identity, decided class, and scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSummary {
    pub global_id: u32,
    pub class_index: usize,
    /// Share of the track's probability mass on the winning class.
    pub confidence: f64,
    /// Mean per-frame class-evidence-times-peak score.
    pub score: f64,
}

/// Wall time spent in each stage of one frame. Diagnostic only; nothing in
/// the output files depends on it.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrameTiming {
    pub grouping: Duration,
    pub flow: Duration,
    pub matching: Duration,
    pub labeling: Duration,
}

impl FrameTiming {
    pub fn total(&self) -> Duration {
        self.grouping + self.flow + self.matching + self.labeling
    }
}

/// The result of running the pipeline over a sequence.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// One global identity map per frame.
    pub identity_maps: Vec<IdentityMap>,
    pub tracks: Vec<TrackSummary>,
    pub timings: Vec<FrameTiming>,
}

/// Incremental pipeline state, fed one frame at a time so a driver can
/// stream frames from disk and write each identity map as it is produced.
#[derive(Debug, Clone)]
pub struct PipelineState {
    params: PipelineParams,
    tracker: TrackerState,
    evidence: Option<EvidenceAccumulator>,
    /// Global identity maps of retained reference frames, kept only when
    /// matching by mask overlap.
    reference_maps: BTreeMap<usize, IdentityMap>,
    frame_index: usize,
    dims: Option<(usize, usize, usize)>,
}

impl PipelineState {
    pub fn new(params: PipelineParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            tracker: TrackerState::new(params.matching.policy),
            evidence: None,
            reference_maps: BTreeMap::new(),
            frame_index: 0,
            dims: None,
        })
    }

    pub fn params(&self) -> &PipelineParams {
        &self.params
    }

    /// Index of the next frame to process.
    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    /// Processes the next frame and returns its global identity map.
    pub fn process_frame(&mut self, pred: &FramePrediction) -> Result<(IdentityMap, FrameTiming)> {
        let t = self.frame_index;
        let dims = (pred.height(), pred.width(), pred.num_classes());
        match self.dims {
            None => self.dims = Some(dims),
            Some(expected) if expected != dims => {
                return Err(Error::DimensionMismatch(format!(
                    "frame {t} is {}x{} with {} classes, the sequence started as {}x{} with {}",
                    dims.0, dims.1, dims.2, expected.0, expected.1, expected.2
                )));
            }
            Some(_) => {}
        }
        let mut timing = FrameTiming::default();

        let start = Instant::now();
        let (local, records) = segment_frame(pred, &self.params.grouping)?;
        timing.grouping = start.elapsed();

        let start = Instant::now();
        let demanded = self.params.matching.policy.select_references(t);
        let targets = self.flow_targets(pred, &records, &demanded)?;
        timing.flow = start.elapsed();

        let start = Instant::now();
        let decisions = match self.params.flow_method {
            FlowMethod::Iou => self.overlap_decisions(t, pred, &local, &records, &demanded)?,
            _ => {
                let references = self.tracker.references(t)?;
                match_instances(t, &targets, &references, self.params.matching.epsilon)?
            }
        };
        let (global, assigned) = self.tracker.propagate(t, &targets, &decisions, &local)?;
        timing.matching = start.elapsed();

        let start = Instant::now();
        if self.evidence.is_none() {
            self.evidence = Some(EvidenceAccumulator::new(pred.num_classes())?);
        }
        let accumulator = self.evidence.as_mut().unwrap();
        let vectors: Vec<Vec<f64>> = records
            .par_iter()
            .map(|record| evidence_from_pixels(&pred.semantic, &record.pixels))
            .collect();
        for ((record, vector), &global_id) in records.iter().zip(vectors).zip(&assigned) {
            accumulator.observe(global_id, vector, record.peak_value())?;
        }
        timing.labeling = start.elapsed();

        if self.params.flow_method == FlowMethod::Iou {
            self.reference_maps.insert(t, global.clone());
            let policy = self.params.matching.policy;
            self.reference_maps.retain(|&r, _| policy.retains(r, t));
        }
        self.frame_index = t + 1;
        Ok((global, timing))
    }

    /// Builds the matching targets, estimating one flow per demanded
    /// reference (none when matching by mask overlap).
    fn flow_targets(
        &self,
        pred: &FramePrediction,
        records: &[InstanceRecord],
        demanded: &[usize],
    ) -> Result<Vec<TargetInstance>> {
        if self.params.flow_method == FlowMethod::Iou {
            return Ok(records
                .iter()
                .map(|record| TargetInstance {
                    local_id: record.local_id,
                    center: record.center_pos(),
                    flows: Vec::new(),
                })
                .collect());
        }
        let stride = self.params.matching.flow_stride;
        let method = self.params.flow_method;
        let intra = &pred.intra;
        let fields: Vec<(usize, &OffsetField)> = demanded
            .iter()
            .map(|&r| Ok((r, pred.inter_offsets(r)?)))
            .collect::<Result<_>>()?;
        Ok(records
            .par_iter()
            .map(|record| {
                let flows = fields
                    .iter()
                    .map(|&(r, inter)| {
                        let flow = match method {
                            FlowMethod::Avg => avg_from_pixels(&record.pixels, inter, stride),
                            _ => flow_from_pixels(&record.pixels, intra, inter, stride),
                        };
                        (r, flow)
                    })
                    .collect();
                TargetInstance {
                    local_id: record.local_id,
                    center: record.center_pos(),
                    flows,
                }
            })
            .collect())
    }

    /// Mask-overlap matching: candidates from every stored reference map are
    /// pooled and accepted greedily by descending overlap (ties: smaller
    /// frame gap, then smaller global id, then smaller local id).
    fn overlap_decisions(
        &self,
        frame_index: usize,
        pred: &FramePrediction,
        local: &IdentityMap,
        records: &[InstanceRecord],
        demanded: &[usize],
    ) -> Result<Vec<MatchDecision>> {
        let mut slot_of = BTreeMap::new();
        for (slot, record) in records.iter().enumerate() {
            slot_of.insert(record.local_id, slot);
        }
        // (overlap, frame gap, global id, target slot)
        let mut candidates: Vec<(f64, usize, u32, usize)> = demanded
            .par_iter()
            .map(|&r| {
                let reference_ids = self
                    .reference_maps
                    .get(&r)
                    .ok_or(Error::MissingReference(r))?;
                let inter = pred.inter_offsets(r)?;
                let motion = residual_field(&pred.intra, inter)?;
                let matches = iou_propagation_match(local, &motion, reference_ids)?;
                let gap = frame_index - r;
                Ok(matches
                    .into_iter()
                    .filter_map(|(target_id, hit)| {
                        let slot = *slot_of.get(&target_id)?;
                        hit.map(|(global_id, overlap)| (overlap, gap, global_id, slot))
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();

        candidates.sort_unstable_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(records[a.3].local_id.cmp(&records[b.3].local_id))
        });

        let mut decisions = vec![MatchDecision::New; records.len()];
        let mut assigned = vec![false; records.len()];
        let mut claimed = BTreeSet::new();
        for (_, _, global_id, slot) in candidates {
            if assigned[slot] || claimed.contains(&global_id) {
                continue;
            }
            assigned[slot] = true;
            claimed.insert(global_id);
            decisions[slot] = MatchDecision::Inherit(global_id);
        }
        Ok(decisions)
    }

    /// Closes the sequence: decides every track's class and scores it.
    pub fn finalize(self) -> Result<Vec<TrackSummary>> {
        let Some(evidence) = self.evidence else {
            return Ok(Vec::new());
        };
        evidence
            .finalize_labels()
            .into_iter()
            .map(|label| {
                let score = evidence.track_score(label.global_id, label.class_index)?;
                Ok(TrackSummary {
                    global_id: label.global_id,
                    class_index: label.class_index,
                    confidence: label.confidence,
                    score,
                })
            })
            .collect()
    }
}

/// Per-pixel inter-minus-intra residual: how far each pixel's center moved
/// between the two frames.
fn residual_field(intra: &OffsetField, inter: &OffsetField) -> Result<OffsetField> {
    let data = inter
        .data()
        .iter()
        .zip(intra.data())
        .map(|(a, b)| a - b)
        .collect();
    OffsetField::new(inter.height(), inter.width(), data)
}

/// Runs the whole pipeline over an in-memory sequence.
pub fn run_on_frames(
    frames: &[FramePrediction],
    params: &PipelineParams,
) -> Result<PipelineOutput> {
    let mut state = PipelineState::new(*params)?;
    let mut identity_maps = Vec::with_capacity(frames.len());
    let mut timings = Vec::with_capacity(frames.len());
    for pred in frames {
        let (ids, timing) = state.process_frame(pred)?;
        identity_maps.push(ids);
        timings.push(timing);
    }
    let tracks = state.finalize()?;
    Ok(PipelineOutput {
        identity_maps,
        tracks,
        timings,
    })
}
