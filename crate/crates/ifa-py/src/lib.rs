//! Python bindings for the assembly pipeline. The module mirrors the CLI's
//! workflow: build a [`Scene`], generate a [`Sequence`] (optionally
//! perturbed by a [`Noise`] model), run [`track`] over it, then [`evaluate`]
//! or [`losses`] against the ground truth. Maps cross the boundary as plain
//! nested lists, which keeps the module dependency-free on the Python side.

use std::collections::BTreeMap;
use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use ifa::eval::{average_precision, identity_switches, tracks_from_maps, IOU_THRESHOLDS};
use ifa::io;
use ifa::losses::{
    center_loss, offset_loss, semantic_loss, shape_loss, total_loss, LossComponents, LossWeights,
};
use ifa::maps::ClassMap;
use ifa::pipeline::{run_on_frames, PipelineParams, TrackSummary};
use ifa::synth::{
    generate_sequence, perturb_sequence, GroundTruth, NoiseSpec, SceneSpec, ShapeKind, ShapeSpec,
};
use ifa::{FramePrediction, IdentityMap, ReferencePolicy, ScalarMap};

fn err(e: ifa::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_u32(map: &IdentityMap) -> Vec<Vec<u32>> {
    map.data().chunks(map.width()).map(|r| r.to_vec()).collect()
}

/// A synthetic scene: image geometry plus a cast of moving shapes.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Scene {
    spec: SceneSpec,
}

#[pymethods]
impl Scene {
    #[new]
    #[pyo3(signature = (height, width, num_frames, heatmap_sigma=8.0, seed=0, num_classes=None))]
    fn new(
        height: usize,
        width: usize,
        num_frames: usize,
        heatmap_sigma: f64,
        seed: u64,
        num_classes: Option<usize>,
    ) -> Self {
        Scene {
            spec: SceneSpec {
                height,
                width,
                num_frames,
                num_classes,
                heatmap_sigma,
                seed,
                shapes: Vec::new(),
            },
        }
    }

    /// Adds one moving shape; `kind` is "disk" or "rect", `size` holds the
    /// half-extents per axis, positions and velocities are (row, col).
    #[pyo3(signature = (kind, size, class_index, initial, velocity, birth_frame=0, death_frame=None))]
    #[allow(clippy::too_many_arguments)]
    fn add_shape(
        &mut self,
        kind: &str,
        size: (f64, f64),
        class_index: usize,
        initial: (f64, f64),
        velocity: (f64, f64),
        birth_frame: usize,
        death_frame: Option<usize>,
    ) -> PyResult<()> {
        let kind = match kind {
            "disk" => ShapeKind::Disk,
            "rect" | "rectangle" => ShapeKind::Rectangle,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown shape kind {other:?}"
                )))
            }
        };
        self.spec.shapes.push(ShapeSpec {
            kind,
            size: [size.0, size.1],
            class_index,
            initial: [initial.0, initial.1],
            velocity: [velocity.0, velocity.1],
            birth_frame,
            death_frame: death_frame.unwrap_or(self.spec.num_frames - 1),
        });
        Ok(())
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Scene> {
        let spec: SceneSpec =
            toml_parse(text).map_err(|e| PyValueError::new_err(format!("bad scene: {e}")))?;
        Ok(Scene { spec })
    }

    fn to_toml(&self) -> PyResult<String> {
        toml_emit(&self.spec).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Renders the ideal per-frame maps and ground truth for this scene.
    #[pyo3(signature = (policy="first+3"))]
    fn generate(&self, policy: &str) -> PyResult<Sequence> {
        let policy: ReferencePolicy = policy.parse().map_err(err)?;
        let (frames, gt) = generate_sequence(&self.spec, policy).map_err(err)?;
        Ok(Sequence {
            frames,
            gt,
            scene: self.spec.clone(),
            policy,
            noise: None,
        })
    }
}

fn toml_parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

fn toml_emit<T: serde::Serialize>(value: &T) -> Result<String, String> {
    toml::to_string(value).map_err(|e| e.to_string())
}

/// The corruption model applied to ideal maps.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Noise {
    spec: NoiseSpec,
}

#[pymethods]
impl Noise {
    #[new]
    #[pyo3(signature = (offset_noise_sigma=0.0, heatmap_jitter=0.0, peak_dropout_prob=0.0, spurious_peak_rate=0.0, mask_erosion=0, semantic_flip_prob=0.0))]
    fn new(
        offset_noise_sigma: f64,
        heatmap_jitter: f64,
        peak_dropout_prob: f64,
        spurious_peak_rate: f64,
        mask_erosion: usize,
        semantic_flip_prob: f64,
    ) -> PyResult<Self> {
        let spec = NoiseSpec {
            offset_noise_sigma,
            heatmap_jitter,
            peak_dropout_prob,
            spurious_peak_rate,
            mask_erosion,
            semantic_flip_prob,
        };
        spec.validate().map_err(err)?;
        Ok(Noise { spec })
    }
}

/// Generated per-frame predictions together with their ground truth.
#[pyclass]
struct Sequence {
    frames: Vec<FramePrediction>,
    gt: GroundTruth,
    scene: SceneSpec,
    policy: ReferencePolicy,
    noise: Option<NoiseSpec>,
}

#[pymethods]
impl Sequence {
    #[getter]
    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    #[getter]
    fn height(&self) -> usize {
        self.scene.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.scene.width
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.scene.resolved_num_classes()
    }

    #[getter]
    fn policy(&self) -> String {
        self.policy.to_string()
    }

    /// A corrupted copy of this sequence; the ground truth is unchanged.
    #[pyo3(signature = (noise, seed=None))]
    fn perturb(&self, noise: &Noise, seed: Option<u64>) -> PyResult<Sequence> {
        let seed = seed.unwrap_or(self.scene.seed);
        let frames = perturb_sequence(&self.frames, &noise.spec, self.scene.heatmap_sigma, seed)
            .map_err(err)?;
        Ok(Sequence {
            frames,
            gt: self.gt.clone(),
            scene: self.scene.clone(),
            policy: self.policy,
            noise: Some(noise.spec),
        })
    }

    fn heatmap(&self, frame: usize) -> PyResult<Vec<Vec<f32>>> {
        let f = self.frame(frame)?;
        Ok(f.heatmap
            .data()
            .chunks(f.width())
            .map(|r| r.to_vec())
            .collect())
    }

    fn gt_identity(&self, frame: usize) -> PyResult<Vec<Vec<u32>>> {
        self.gt
            .identities
            .get(frame)
            .map(rows_u32)
            .ok_or_else(|| PyValueError::new_err(format!("no frame {frame}")))
    }

    /// Ground-truth tracks as `(id, class_index, birth_frame, death_frame)`.
    fn gt_tracks(&self) -> Vec<(u32, usize, usize, usize)> {
        self.gt
            .tracks
            .iter()
            .map(|t| (t.id, t.class_index, t.birth_frame, t.death_frame))
            .collect()
    }

    /// Writes the sequence as a directory the `ifa` CLI can read.
    #[pyo3(signature = (dir, name=None))]
    fn save(&self, dir: &str, name: Option<&str>) -> PyResult<()> {
        let fallback = Path::new(dir)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        io::save_sequence(
            Path::new(dir),
            name.unwrap_or(&fallback),
            &self.scene,
            self.noise.as_ref(),
            self.policy,
            &self.frames,
            &self.gt,
        )
        .map_err(err)
    }

    /// Reads a sequence directory written by `save` or by the CLI.
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Sequence> {
        let dir = Path::new(dir);
        let manifest = io::load_sequence_manifest(dir).map_err(err)?;
        let policy = manifest.policy().map_err(err)?;
        let mut frames = Vec::with_capacity(manifest.num_frames);
        let mut identities = Vec::with_capacity(manifest.num_frames);
        let mut classes = Vec::with_capacity(manifest.num_frames);
        for t in 0..manifest.num_frames {
            frames.push(io::load_frame(dir, &manifest, t).map_err(err)?);
            let (ids, cls) = io::load_gt_frame(dir, &manifest, t)
                .map_err(err)?
                .ok_or_else(|| {
                    PyValueError::new_err(format!("sequence has no ground truth for frame {t}"))
                })?;
            identities.push(ids);
            classes.push(cls);
        }
        let gt = GroundTruth {
            identities,
            classes,
            tracks: manifest
                .gt_tracks
                .iter()
                .map(|t| ifa::synth::GtTrack {
                    id: t.id,
                    class_index: t.class_index,
                    birth_frame: t.birth_frame,
                    death_frame: t.death_frame,
                })
                .collect(),
        };
        let scene = SceneSpec {
            height: manifest.height,
            width: manifest.width,
            num_frames: manifest.num_frames,
            num_classes: Some(manifest.num_classes),
            heatmap_sigma: manifest.heatmap_sigma.unwrap_or(8.0),
            seed: manifest.seed.unwrap_or(0),
            shapes: Vec::new(),
        };
        Ok(Sequence {
            frames,
            gt,
            scene,
            policy,
            noise: manifest.noise,
        })
    }

    fn frame_references(&self, frame: usize) -> PyResult<Vec<usize>> {
        Ok(self.frame(frame)?.reference_indices())
    }
}

impl Sequence {
    fn frame(&self, index: usize) -> PyResult<&FramePrediction> {
        self.frames
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no frame {index}")))
    }
}

/// One finished track.
#[pyclass(name = "Track", skip_from_py_object)]
#[derive(Clone)]
struct PyTrack {
    #[pyo3(get)]
    global_id: u32,
    #[pyo3(get)]
    class_index: usize,
    #[pyo3(get)]
    confidence: f64,
    #[pyo3(get)]
    score: f64,
}

#[pymethods]
impl PyTrack {
    fn __repr__(&self) -> String {
        format!(
            "Track(global_id={}, class_index={}, confidence={:.4}, score={:.4})",
            self.global_id, self.class_index, self.confidence, self.score
        )
    }
}

/// Identity maps and track summaries produced by [`track`].
#[pyclass]
struct Results {
    maps: Vec<IdentityMap>,
    summaries: Vec<TrackSummary>,
}

#[pymethods]
impl Results {
    #[getter]
    fn num_frames(&self) -> usize {
        self.maps.len()
    }

    fn identity(&self, frame: usize) -> PyResult<Vec<Vec<u32>>> {
        self.maps
            .get(frame)
            .map(rows_u32)
            .ok_or_else(|| PyValueError::new_err(format!("no frame {frame}")))
    }

    fn tracks(&self) -> Vec<PyTrack> {
        self.summaries
            .iter()
            .map(|t| PyTrack {
                global_id: t.global_id,
                class_index: t.class_index,
                confidence: t.confidence,
                score: t.score,
            })
            .collect()
    }

    /// One frame's identity map rendered to PNG bytes.
    fn render_png<'py>(&self, py: Python<'py>, frame: usize) -> PyResult<Bound<'py, PyBytes>> {
        let map = self
            .maps
            .get(frame)
            .ok_or_else(|| PyValueError::new_err(format!("no frame {frame}")))?;
        let img = ifa::render::render_identity(map);
        let mut buf = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyBytes::new(py, &buf))
    }
}

/// Runs the assembly pipeline over a sequence.
#[pyfunction]
#[pyo3(signature = (seq, flow_method="residual", epsilon=None, refs=None, nms_window=41, center_threshold=0.15, flow_stride=1))]
#[allow(clippy::too_many_arguments)]
fn track(
    seq: PyRef<'_, Sequence>,
    flow_method: &str,
    epsilon: Option<f64>,
    refs: Option<&str>,
    nms_window: usize,
    center_threshold: f64,
    flow_stride: usize,
) -> PyResult<Results> {
    let mut params = PipelineParams::for_image(seq.scene.height, seq.scene.width);
    params.grouping.nms_window = nms_window;
    params.grouping.center_threshold = center_threshold;
    if let Some(epsilon) = epsilon {
        params.matching.epsilon = epsilon;
    }
    params.matching.policy = match refs {
        Some(text) => text.parse().map_err(err)?,
        None => seq.policy,
    };
    params.matching.flow_stride = flow_stride;
    params.flow_method = flow_method.parse().map_err(err)?;
    params.validate().map_err(err)?;
    let out = run_on_frames(&seq.frames, &params).map_err(err)?;
    Ok(Results {
        maps: out.identity_maps,
        summaries: out.tracks,
    })
}

/// Scores results against a sequence's ground truth; returns a dict with
/// ap, ap50, ap75, ar1, ar10, and identity_switches.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    results: PyRef<'_, Results>,
    seq: PyRef<'_, Sequence>,
) -> PyResult<Bound<'py, PyDict>> {
    let labels: BTreeMap<u32, (usize, f64)> = results
        .summaries
        .iter()
        .map(|t| (t.global_id, (t.class_index, t.score)))
        .collect();
    let preds = tracks_from_maps(&results.maps, &labels).map_err(err)?;
    let gt_labels: BTreeMap<u32, (usize, f64)> = seq
        .gt
        .tracks
        .iter()
        .map(|t| (t.id, (t.class_index, 1.0)))
        .collect();
    let gts = tracks_from_maps(&seq.gt.identities, &gt_labels).map_err(err)?;
    let metrics = average_precision(&preds, &gts, &IOU_THRESHOLDS);
    let dict = PyDict::new(py);
    dict.set_item("ap", metrics.ap)?;
    dict.set_item("ap50", metrics.ap50)?;
    dict.set_item("ap75", metrics.ap75)?;
    dict.set_item("ar1", metrics.ar1)?;
    dict.set_item("ar10", metrics.ar10)?;
    dict.set_item("identity_switches", identity_switches(&preds, &gts))?;
    Ok(dict)
}

fn foreground_weights(classes: &ClassMap) -> PyResult<ScalarMap> {
    let data = classes
        .data()
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 })
        .collect();
    ScalarMap::new(classes.height(), classes.width(), data).map_err(err)
}

/// Training losses of a predicted sequence against a target sequence;
/// returns a dict with the five components and the weighted total.
#[pyfunction]
#[pyo3(signature = (pred, target, lambda_cent=100.0, lambda_inter=0.01, lambda_intra=0.01, lambda_shape=0.01))]
fn losses<'py>(
    py: Python<'py>,
    pred: PyRef<'_, Sequence>,
    target: PyRef<'_, Sequence>,
    lambda_cent: f64,
    lambda_inter: f64,
    lambda_intra: f64,
    lambda_shape: f64,
) -> PyResult<Bound<'py, PyDict>> {
    if pred.frames.len() != target.frames.len() {
        return Err(PyValueError::new_err(format!(
            "prediction has {} frames but the target has {}",
            pred.frames.len(),
            target.frames.len()
        )));
    }
    let weights = LossWeights {
        lambda_cent,
        lambda_inter,
        lambda_intra,
        lambda_shape,
    };
    weights.validate().map_err(err)?;
    let ones = ScalarMap::new(
        target.scene.height,
        target.scene.width,
        vec![1.0; target.scene.height * target.scene.width],
    )
    .map_err(err)?;

    let mut sums = LossComponents::default();
    let mut ref_pairs = 0usize;
    for (t, (p, g)) in pred.frames.iter().zip(&target.frames).enumerate() {
        let gt_classes = target.gt.classes.get(t).ok_or_else(|| {
            PyValueError::new_err(format!("target has no ground truth for frame {t}"))
        })?;
        let fg = foreground_weights(gt_classes)?;
        sums.semantic += semantic_loss(&p.semantic, gt_classes).map_err(err)?;
        sums.center += center_loss(&p.heatmap, &g.heatmap, &ones).map_err(err)?;
        sums.intra += offset_loss(&p.intra, &g.intra, &fg).map_err(err)?;
        for (r, gt_inter) in g.inter() {
            let pred_inter = p.inter_offsets(*r).map_err(err)?;
            sums.inter += offset_loss(pred_inter, gt_inter, &fg).map_err(err)?;
            sums.shape += shape_loss(&p.intra, pred_inter, &g.intra, gt_inter, &fg).map_err(err)?;
            ref_pairs += 1;
        }
    }
    let frames = pred.frames.len() as f64;
    let components = LossComponents {
        semantic: sums.semantic / frames,
        center: sums.center / frames,
        intra: sums.intra / frames,
        inter: if ref_pairs > 0 {
            sums.inter / ref_pairs as f64
        } else {
            0.0
        },
        shape: if ref_pairs > 0 {
            sums.shape / ref_pairs as f64
        } else {
            0.0
        },
    };
    let total = total_loss(&components, &weights).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("semantic", components.semantic)?;
    dict.set_item("center", components.center)?;
    dict.set_item("inter", components.inter)?;
    dict.set_item("intra", components.intra)?;
    dict.set_item("shape", components.shape)?;
    dict.set_item("total", total)?;
    Ok(dict)
}

/// The default center-match threshold for an image size: a tenth of the
/// diagonal.
#[pyfunction]
fn default_epsilon(height: usize, width: usize) -> f64 {
    ifa::matching::default_epsilon(height, width)
}

#[pymodule]
fn ifa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Noise>()?;
    m.add_class::<Sequence>()?;
    m.add_class::<Results>()?;
    m.add_class::<PyTrack>()?;
    m.add_function(wrap_pyfunction!(track, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(losses, m)?)?;
    m.add_function(wrap_pyfunction!(default_epsilon, m)?)?;
    Ok(())
}
