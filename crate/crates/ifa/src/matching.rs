//! Identity matching across reference frames.
//!
//! Each already-processed frame leaves behind its instances' centers and
//! global ids. For a new frame, every instance's center is warped by its
//! per-reference flow and compared against the reference centers; candidate
//! pairs from all references are pooled and greedily accepted in ascending
//! distance, one-to-one per frame. Instances nothing claims become new
//! tracks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::flow::InstanceFlow;
use crate::maps::IdentityMap;
use crate::{Error, Result};

/// Which past frames a target frame is matched against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferencePolicy {
    /// The first frame plus the `n` frames immediately before the target.
    FirstPlusAdjacent(usize),
    /// Only the `n` frames immediately before the target.
    Adjacent(usize),
}

impl Default for ReferencePolicy {
    fn default() -> Self {
        ReferencePolicy::FirstPlusAdjacent(3)
    }
}

impl ReferencePolicy {
    pub fn validate(&self) -> Result<()> {
        let n = match self {
            ReferencePolicy::FirstPlusAdjacent(n) | ReferencePolicy::Adjacent(n) => *n,
        };
        if n == 0 {
            return Err(Error::InvalidParameter(
                "reference policy needs at least one adjacent frame".into(),
            ));
        }
        Ok(())
    }

    /// Reference frame indices for a target at `frame_index`: deduplicated,
    /// ascending, empty at frame 0.
    pub fn select_references(&self, frame_index: usize) -> Vec<usize> {
        if frame_index == 0 {
            return Vec::new();
        }
        let (first, n) = match self {
            ReferencePolicy::FirstPlusAdjacent(n) => (true, *n),
            ReferencePolicy::Adjacent(n) => (false, *n),
        };
        let start = frame_index.saturating_sub(n);
        let mut refs: Vec<usize> = (start..frame_index).collect();
        if first && start > 0 {
            refs.insert(0, 0);
        }
        refs
    }

    /// Whether `reference` can still be demanded by any frame after
    /// `frame_index` (used to bound reference memory).
    pub fn retains(&self, reference: usize, frame_index: usize) -> bool {
        match self {
            ReferencePolicy::FirstPlusAdjacent(n) => reference == 0 || reference + n > frame_index,
            ReferencePolicy::Adjacent(n) => reference + n > frame_index,
        }
    }
}

impl fmt::Display for ReferencePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferencePolicy::FirstPlusAdjacent(n) => write!(f, "first+{n}"),
            ReferencePolicy::Adjacent(n) => write!(f, "adj-{n}"),
        }
    }
}

impl FromStr for ReferencePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_n = |text: &str| -> Result<usize> {
            text.parse::<usize>().map_err(|_| {
                Error::InvalidParameter(format!("bad reference policy count in {s:?}"))
            })
        };
        let policy = if let Some(n) = s.strip_prefix("first+") {
            ReferencePolicy::FirstPlusAdjacent(parse_n(n)?)
        } else if let Some(n) = s.strip_prefix("adj-") {
            ReferencePolicy::Adjacent(parse_n(n)?)
        } else if let Some(n) = s.strip_prefix("adjacent-") {
            ReferencePolicy::Adjacent(parse_n(n)?)
        } else {
            return Err(Error::InvalidParameter(format!(
                "unknown reference policy {s:?}, expected first+N or adj-N"
            )));
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Matching knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingParams {
    /// Maximum warped-center distance (pixels) for inheriting an identity.
    pub epsilon: f64,
    pub policy: ReferencePolicy,
    /// Subsampling stride for flow estimation.
    pub flow_stride: usize,
}

impl MatchingParams {
    /// Defaults with the distance threshold scaled to the image diagonal.
    pub fn for_image(height: usize, width: usize) -> Self {
        Self {
            epsilon: default_epsilon(height, width),
            policy: ReferencePolicy::default(),
            flow_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be a positive distance, got {}",
                self.epsilon
            )));
        }
        if self.flow_stride == 0 {
            return Err(Error::InvalidParameter(
                "flow stride must be positive".into(),
            ));
        }
        self.policy.validate()
    }
}

/// One tenth of the image diagonal.
pub fn default_epsilon(height: usize, width: usize) -> f64 {
    0.1 * ((height * height + width * width) as f64).sqrt()
}

/// A segmented instance of the current frame, ready for matching: its center
/// and one flow per reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetInstance {
    pub local_id: u32,
    pub center: [f64; 2],
    pub flows: Vec<(usize, InstanceFlow)>,
}

impl TargetInstance {
    pub fn flow_for(&self, reference: usize) -> Result<&InstanceFlow> {
        self.flows
            .iter()
            .find(|(r, _)| *r == reference)
            .map(|(_, f)| f)
            .ok_or(Error::MissingReference(reference))
    }
}

/// What one processed frame leaves behind for future matching.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFrame {
    pub frame_index: usize,
    pub instances: Vec<ReferenceInstance>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceInstance {
    pub global_id: u32,
    pub center: [f64; 2],
}

/// `d[m][n]` = distance between target m's center warped by its flow toward
/// `reference` and reference instance n's center.
pub fn distance_matrix(
    targets: &[TargetInstance],
    reference: &ReferenceFrame,
) -> Result<Vec<Vec<f64>>> {
    targets
        .iter()
        .map(|target| {
            let flow = target.flow_for(reference.frame_index)?;
            let warped = [
                target.center[0] + flow.vector[0],
                target.center[1] + flow.vector[1],
            ];
            Ok(reference
                .instances
                .iter()
                .map(|r| {
                    ((warped[0] - r.center[0]).powi(2) + (warped[1] - r.center[1]).powi(2)).sqrt()
                })
                .collect())
        })
        .collect()
}

/// Per-target outcome of [`match_instances`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchDecision {
    /// Inherit this global id.
    Inherit(u32),
    /// Start a new track.
    New,
}

/// Pools warped-center distances against every reference frame and accepts
/// pairs greedily in ascending distance (ties: smaller frame gap, then
/// smaller global id, then smaller local id). A pair is accepted while the
/// target is unassigned, the global id unclaimed in this frame, and the
/// distance is within epsilon; everything left over becomes a new track.
pub fn match_instances(
    frame_index: usize,
    targets: &[TargetInstance],
    references: &[ReferenceFrame],
    epsilon: f64,
) -> Result<Vec<MatchDecision>> {
    // (distance, frame gap, global id, target slot)
    let mut triples: Vec<(f64, usize, u32, usize)> = references
        .par_iter()
        .map(|reference| {
            let d = distance_matrix(targets, reference)?;
            let gap = frame_index - reference.frame_index;
            let mut part = Vec::with_capacity(targets.len() * reference.instances.len());
            for (ti, row) in d.iter().enumerate() {
                for (n, &dist) in row.iter().enumerate() {
                    part.push((dist, gap, reference.instances[n].global_id, ti));
                }
            }
            Ok(part)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    triples.sort_unstable_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(targets[a.3].local_id.cmp(&targets[b.3].local_id))
    });

    let mut decisions = vec![MatchDecision::New; targets.len()];
    let mut assigned = vec![false; targets.len()];
    let mut claimed = std::collections::BTreeSet::new();
    for (dist, _, global_id, ti) in triples {
        if dist > epsilon {
            break;
        }
        if assigned[ti] || claimed.contains(&global_id) {
            continue;
        }
        assigned[ti] = true;
        claimed.insert(global_id);
        decisions[ti] = MatchDecision::Inherit(global_id);
    }
    Ok(decisions)
}

/// Identity bookkeeping across a sequence: the next unused global id and the
/// reference frames the policy may still demand.
#[derive(Debug, Clone)]
pub struct TrackerState {
    policy: ReferencePolicy,
    next_global_id: u32,
    memory: BTreeMap<usize, ReferenceFrame>,
}

impl TrackerState {
    pub fn new(policy: ReferencePolicy) -> Self {
        Self {
            policy,
            next_global_id: 1,
            memory: BTreeMap::new(),
        }
    }

    pub fn policy(&self) -> ReferencePolicy {
        self.policy
    }

    pub fn next_global_id(&self) -> u32 {
        self.next_global_id
    }

    /// The reference frames to match `frame_index` against.
    pub fn references(&self, frame_index: usize) -> Result<Vec<ReferenceFrame>> {
        self.policy
            .select_references(frame_index)
            .into_iter()
            .map(|r| {
                self.memory
                    .get(&r)
                    .cloned()
                    .ok_or(Error::MissingReference(r))
            })
            .collect()
    }

    /// Frame indices currently held as references.
    pub fn retained_frames(&self) -> Vec<usize> {
        self.memory.keys().copied().collect()
    }

    /// Commits one frame: turns match decisions into global ids (new tracks
    /// numbered in ascending local id order), relabels the frame's identity
    /// map, and stores this frame as a future reference, evicting frames the
    /// policy can no longer reach. Returns the relabeled map and each
    /// target's global id, in target order.
    pub fn propagate(
        &mut self,
        frame_index: usize,
        targets: &[TargetInstance],
        decisions: &[MatchDecision],
        local: &IdentityMap,
    ) -> Result<(IdentityMap, Vec<u32>)> {
        if targets.len() != decisions.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} targets but {} match decisions",
                targets.len(),
                decisions.len()
            )));
        }
        let mut lut = vec![0u32; targets.len() + 1];
        let mut assigned = Vec::with_capacity(targets.len());
        let mut instances = Vec::with_capacity(targets.len());
        let mut seen = std::collections::BTreeSet::new();
        let mut local_ids = std::collections::BTreeSet::new();
        for target in targets {
            let in_range = target.local_id != 0 && target.local_id as usize <= targets.len();
            if !in_range || !local_ids.insert(target.local_id) {
                return Err(Error::UnknownInstance(target.local_id));
            }
        }
        for (target, decision) in targets.iter().zip(decisions) {
            let global_id = match decision {
                MatchDecision::Inherit(g) => *g,
                MatchDecision::New => {
                    let g = self.next_global_id;
                    self.next_global_id += 1;
                    g
                }
            };
            let fresh = seen.insert(global_id);
            debug_assert!(fresh, "global id {global_id} claimed twice");
            lut[target.local_id as usize] = global_id;
            assigned.push(global_id);
            instances.push(ReferenceInstance {
                global_id,
                center: target.center,
            });
        }

        let mut relabeled = Vec::with_capacity(local.data().len());
        for &id in local.data() {
            let global_id = *lut.get(id as usize).ok_or(Error::UnknownInstance(id))?;
            relabeled.push(global_id);
        }
        let global = IdentityMap::new(local.height(), local.width(), relabeled)?;

        self.memory.insert(
            frame_index,
            ReferenceFrame {
                frame_index,
                instances,
            },
        );
        let policy = self.policy;
        self.memory.retain(|&r, _| policy.retains(r, frame_index));
        Ok((global, assigned))
    }
}
