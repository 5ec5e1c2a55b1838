//! On-disk formats: the binary map container and the TOML manifests tying a
//! sequence directory together.
//!
//! A map file is a 20-byte header (magic `IFA1`, then little-endian u32
//! dtype code, height, width, channels) followed by the payload, row-major
//! and channel-innermost, little-endian. Dtype 0 is 32-bit float, dtype 1 is
//! 32-bit unsigned. Everything a tool writes is a pure function of its
//! inputs, so reruns and different worker counts produce byte-identical
//! files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::maps::{
    ClassMap, FramePrediction, IdentityMap, OffsetField, ScalarMap, SemanticProbMap,
};
use crate::matching::ReferencePolicy;
use crate::synth::{GroundTruth, GtTrack, NoiseSpec, SceneSpec};
use crate::{Error, Result};

pub const MAP_MAGIC: [u8; 4] = *b"IFA1";
pub const DTYPE_F32: u32 = 0;
pub const DTYPE_U32: u32 = 1;

/// The payload of a map file, with its dtype made explicit.
#[derive(Debug, Clone, PartialEq)]
pub enum MapPayload {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

/// A decoded map file before interpretation as a specific map type.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub payload: MapPayload,
}

fn format_err(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::MapFormat(format!("{}: {what}", path.display()))
}

pub fn read_raw(path: &Path) -> Result<RawMap> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 {
        return Err(format_err(path, "file shorter than the 20-byte header"));
    }
    if bytes[0..4] != MAP_MAGIC {
        return Err(format_err(path, "bad magic, not a map file"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let dtype = field(0);
    let height = field(1) as usize;
    let width = field(2) as usize;
    let channels = field(3) as usize;
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| format_err(path, "header dimensions overflow"))?;
    let expected = 20 + count * 4;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!(
                "payload is {} bytes but {}x{}x{} needs {}",
                bytes.len() - 20,
                height,
                width,
                channels,
                expected - 20
            ),
        ));
    }
    let values = bytes[20..].chunks_exact(4);
    let payload = match dtype {
        DTYPE_F32 => MapPayload::F32(
            values
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        DTYPE_U32 => MapPayload::U32(
            values
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        other => return Err(format_err(path, format!("unknown dtype code {other}"))),
    };
    Ok(RawMap {
        height,
        width,
        channels,
        payload,
    })
}

pub fn write_raw(path: &Path, map: &RawMap) -> Result<()> {
    let count = map
        .height
        .checked_mul(map.width)
        .and_then(|n| n.checked_mul(map.channels))
        .ok_or_else(|| format_err(path, "dimensions overflow"))?;
    let (dtype, len) = match &map.payload {
        MapPayload::F32(v) => (DTYPE_F32, v.len()),
        MapPayload::U32(v) => (DTYPE_U32, v.len()),
    };
    if len != count {
        return Err(format_err(
            path,
            format!("payload has {len} values but dimensions need {count}"),
        ));
    }
    let mut bytes = Vec::with_capacity(20 + count * 4);
    bytes.extend_from_slice(&MAP_MAGIC);
    for v in [
        dtype,
        map.height as u32,
        map.width as u32,
        map.channels as u32,
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    match &map.payload {
        MapPayload::F32(v) => {
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        MapPayload::U32(v) => {
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn expect_f32(path: &Path, raw: RawMap, channels: usize) -> Result<(usize, usize, Vec<f32>)> {
    if raw.channels != channels {
        return Err(format_err(
            path,
            format!("expected {channels} channels, found {}", raw.channels),
        ));
    }
    match raw.payload {
        MapPayload::F32(v) => Ok((raw.height, raw.width, v)),
        MapPayload::U32(_) => Err(format_err(path, "expected float values, found unsigned")),
    }
}

pub fn read_scalar(path: &Path) -> Result<ScalarMap> {
    let (h, w, data) = expect_f32(path, read_raw(path)?, 1)?;
    ScalarMap::new(h, w, data)
}

pub fn write_scalar(path: &Path, map: &ScalarMap) -> Result<()> {
    write_raw(
        path,
        &RawMap {
            height: map.height(),
            width: map.width(),
            channels: 1,
            payload: MapPayload::F32(map.data().to_vec()),
        },
    )
}

pub fn read_offsets(path: &Path) -> Result<OffsetField> {
    let (h, w, data) = expect_f32(path, read_raw(path)?, 2)?;
    OffsetField::new(h, w, data)
}

pub fn write_offsets(path: &Path, field: &OffsetField) -> Result<()> {
    write_raw(
        path,
        &RawMap {
            height: field.height(),
            width: field.width(),
            channels: 2,
            payload: MapPayload::F32(field.data().to_vec()),
        },
    )
}

pub fn read_semantic(path: &Path) -> Result<SemanticProbMap> {
    let raw = read_raw(path)?;
    let channels = raw.channels;
    let (h, w, data) = expect_f32(path, raw, channels)?;
    if channels < 2 {
        return Err(format_err(
            path,
            format!("a class map needs at least 2 channels, found {channels}"),
        ));
    }
    SemanticProbMap::new(h, w, channels, data)
}

pub fn write_semantic(path: &Path, map: &SemanticProbMap) -> Result<()> {
    write_raw(
        path,
        &RawMap {
            height: map.height(),
            width: map.width(),
            channels: map.num_classes(),
            payload: MapPayload::F32(map.data().to_vec()),
        },
    )
}

pub fn read_identity(path: &Path) -> Result<IdentityMap> {
    let raw = read_raw(path)?;
    if raw.channels != 1 {
        return Err(format_err(
            path,
            format!("expected 1 channel, found {}", raw.channels),
        ));
    }
    match raw.payload {
        MapPayload::U32(v) => IdentityMap::new(raw.height, raw.width, v),
        MapPayload::F32(_) => Err(format_err(path, "expected unsigned values, found float")),
    }
}

pub fn write_identity(path: &Path, map: &IdentityMap) -> Result<()> {
    write_raw(
        path,
        &RawMap {
            height: map.height(),
            width: map.width(),
            channels: 1,
            payload: MapPayload::U32(map.data().to_vec()),
        },
    )
}

/// `frame_00042_heatmap.ifa`
pub fn frame_file_name(frame_index: usize, kind: &str) -> String {
    format!("frame_{frame_index:05}_{kind}.ifa")
}

/// `frame_00042_inter_00039.ifa`
pub fn inter_file_name(frame_index: usize, reference: usize) -> String {
    format!("frame_{frame_index:05}_inter_{reference:05}.ifa")
}

pub const SEQUENCE_MANIFEST: &str = "manifest.toml";
pub const RESULTS_MANIFEST: &str = "results.toml";

/// One inter-frame offset file and the reference frame it points back to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterFileRef {
    pub reference: usize,
    pub file: String,
}

/// File names for one frame of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFiles {
    pub index: usize,
    pub semantic: String,
    pub heatmap: String,
    pub intra: String,
    #[serde(default)]
    pub inter: Vec<InterFileRef>,
    #[serde(default)]
    pub gt_ids: Option<String>,
    #[serde(default)]
    pub gt_classes: Option<String>,
}

/// A ground-truth track row in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtTrackEntry {
    pub id: u32,
    pub class_index: usize,
    pub birth_frame: usize,
    pub death_frame: usize,
}

/// The directory-level description of an input sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_frames: usize,
    /// Reference selection the inter-offset files were generated for.
    pub policy: String,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub heatmap_sigma: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    pub frames: Vec<FrameFiles>,
    #[serde(default)]
    pub gt_tracks: Vec<GtTrackEntry>,
}

impl SequenceManifest {
    pub fn policy(&self) -> Result<ReferencePolicy> {
        self.policy.parse()
    }

    /// Structural consistency: one entry per frame in order, references
    /// strictly ascending and behind their frame, classes covered.
    pub fn validate(&self) -> Result<()> {
        self.policy()?;
        if self.frames.len() != self.num_frames {
            return Err(Error::Manifest(format!(
                "{} frame entries for {} frames",
                self.frames.len(),
                self.num_frames
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Manifest(format!(
                "num_classes must cover background plus one class, got {}",
                self.num_classes
            )));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::Manifest(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.index != t {
                return Err(Error::Manifest(format!(
                    "frame entry {t} is labeled index {}",
                    frame.index
                )));
            }
            for pair in frame.inter.windows(2) {
                if pair[0].reference >= pair[1].reference {
                    return Err(Error::Manifest(format!(
                        "frame {t} lists references out of order"
                    )));
                }
            }
            if frame.inter.iter().any(|r| r.reference >= t) {
                return Err(Error::Manifest(format!(
                    "frame {t} references a frame not strictly before it"
                )));
            }
        }
        for track in &self.gt_tracks {
            if track.class_index == 0 || track.class_index >= self.num_classes {
                return Err(Error::Manifest(format!(
                    "gt track {} has class {} outside 1..{}",
                    track.id, track.class_index, self.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// The output of a tracking run: global identity maps plus the track table.
/// Self-contained for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsManifest {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_frames: usize,
    pub policy: String,
    pub frames: Vec<ResultFrame>,
    pub tracks: Vec<ResultTrack>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFrame {
    pub index: usize,
    pub ids: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTrack {
    pub global_id: u32,
    pub class_index: usize,
    pub confidence: f64,
    pub score: f64,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_sequence_manifest(dir: &Path) -> Result<SequenceManifest> {
    let manifest: SequenceManifest = read_toml(&dir.join(SEQUENCE_MANIFEST))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_sequence_manifest(dir: &Path, manifest: &SequenceManifest) -> Result<()> {
    manifest.validate()?;
    write_toml(&dir.join(SEQUENCE_MANIFEST), manifest)
}

pub fn load_results_manifest(dir: &Path) -> Result<ResultsManifest> {
    read_toml(&dir.join(RESULTS_MANIFEST))
}

pub fn save_results_manifest(dir: &Path, manifest: &ResultsManifest) -> Result<()> {
    write_toml(&dir.join(RESULTS_MANIFEST), manifest)
}

/// Reads one frame's prediction maps, checking them against the manifest's
/// geometry. Only the inter-offset references listed for that frame are
/// loaded.
pub fn load_frame(
    dir: &Path,
    manifest: &SequenceManifest,
    frame_index: usize,
) -> Result<FramePrediction> {
    let entry = manifest
        .frames
        .get(frame_index)
        .ok_or_else(|| Error::Manifest(format!("no frame entry {frame_index}")))?;
    let semantic = read_semantic(&dir.join(&entry.semantic))?;
    let heatmap = read_scalar(&dir.join(&entry.heatmap))?;
    let intra = read_offsets(&dir.join(&entry.intra))?;
    if semantic.num_classes() != manifest.num_classes {
        return Err(Error::Manifest(format!(
            "frame {frame_index} has {} classes, manifest says {}",
            semantic.num_classes(),
            manifest.num_classes
        )));
    }
    if semantic.height() != manifest.height || semantic.width() != manifest.width {
        return Err(Error::Manifest(format!(
            "frame {frame_index} is {}x{}, manifest says {}x{}",
            semantic.height(),
            semantic.width(),
            manifest.height,
            manifest.width
        )));
    }
    let mut inter = Vec::with_capacity(entry.inter.len());
    for r in &entry.inter {
        inter.push((r.reference, read_offsets(&dir.join(&r.file))?));
    }
    FramePrediction::new(semantic, heatmap, intra, inter)
}

/// Reads one frame's ground-truth maps, if the manifest lists them.
pub fn load_gt_frame(
    dir: &Path,
    manifest: &SequenceManifest,
    frame_index: usize,
) -> Result<Option<(IdentityMap, ClassMap)>> {
    let entry = manifest
        .frames
        .get(frame_index)
        .ok_or_else(|| Error::Manifest(format!("no frame entry {frame_index}")))?;
    let (Some(ids), Some(classes)) = (&entry.gt_ids, &entry.gt_classes) else {
        return Ok(None);
    };
    Ok(Some((
        read_identity(&dir.join(ids))?,
        read_identity(&dir.join(classes))?,
    )))
}

/// Writes a generated sequence as a directory: one file per map, ground
/// truth included, plus the manifest.
pub fn save_sequence(
    dir: &Path,
    name: &str,
    spec: &SceneSpec,
    noise: Option<&NoiseSpec>,
    policy: ReferencePolicy,
    frames: &[FramePrediction],
    gt: &GroundTruth,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let entry = FrameFiles {
            index: t,
            semantic: frame_file_name(t, "semantic"),
            heatmap: frame_file_name(t, "heatmap"),
            intra: frame_file_name(t, "intra"),
            inter: frame
                .reference_indices()
                .iter()
                .map(|&r| InterFileRef {
                    reference: r,
                    file: inter_file_name(t, r),
                })
                .collect(),
            gt_ids: Some(frame_file_name(t, "gt_ids")),
            gt_classes: Some(frame_file_name(t, "gt_classes")),
        };
        write_semantic(&dir.join(&entry.semantic), &frame.semantic)?;
        write_scalar(&dir.join(&entry.heatmap), &frame.heatmap)?;
        write_offsets(&dir.join(&entry.intra), &frame.intra)?;
        for (r, field) in frame.inter() {
            write_offsets(&dir.join(inter_file_name(t, *r)), field)?;
        }
        write_identity(&dir.join(entry.gt_ids.as_ref().unwrap()), &gt.identities[t])?;
        write_identity(
            &dir.join(entry.gt_classes.as_ref().unwrap()),
            &gt.classes[t],
        )?;
        entries.push(entry);
    }
    let manifest = SequenceManifest {
        name: name.to_string(),
        height: spec.height,
        width: spec.width,
        num_classes: spec.resolved_num_classes(),
        num_frames: frames.len(),
        policy: policy.to_string(),
        class_names: Vec::new(),
        heatmap_sigma: Some(spec.heatmap_sigma),
        seed: Some(spec.seed),
        noise: noise.copied(),
        frames: entries,
        gt_tracks: gt
            .tracks
            .iter()
            .map(|t: &GtTrack| GtTrackEntry {
                id: t.id,
                class_index: t.class_index,
                birth_frame: t.birth_frame,
                death_frame: t.death_frame,
            })
            .collect(),
    };
    save_sequence_manifest(dir, &manifest)
}

/// Convenience for tools that need a directory's manifest path printed.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(SEQUENCE_MANIFEST)
}
