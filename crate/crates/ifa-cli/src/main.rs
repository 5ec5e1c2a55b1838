//! Command-line front end for the assembly pipeline: generate synthetic
//! sequences, track, evaluate, compute losses, render, and benchmark.
//!
//! Every subcommand's file output is a pure function of its inputs and
//! flags; worker count only changes how fast it happens.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ifa::eval::{average_precision, identity_switches, tracks_from_maps, Track, IOU_THRESHOLDS};
use ifa::io;
use ifa::losses::{
    center_loss, offset_loss, semantic_loss, shape_loss, total_loss, LossComponents, LossWeights,
};
use ifa::maps::ClassMap;
use ifa::pipeline::{FlowMethod, PipelineParams, PipelineState};
use ifa::synth::{generate_sequence, perturb_sequence, NoiseSpec, SceneSpec};
use ifa::{bench, render, ReferencePolicy, ScalarMap};

#[derive(Parser)]
#[command(
    name = "ifa",
    version,
    about = "Video instance assembly from dense per-frame predictions"
)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Overrides the scene seed during generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence directory from a scene description.
    Synth(SynthArgs),
    /// Run the assembly pipeline over a sequence directory.
    Track(TrackArgs),
    /// Score tracking results against a sequence's ground truth.
    Eval(EvalArgs),
    /// Compute training losses of predicted maps against target maps.
    Loss(LossArgs),
    /// Render identity maps to PNG images.
    Render(RenderArgs),
    /// Time the assembly stages over a sequence.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (TOML).
    #[arg(long)]
    scene: PathBuf,
    /// Output sequence directory.
    #[arg(long)]
    out: PathBuf,
    /// Noise description (TOML) applied to the ideal maps.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Reference policy the inter-frame offsets are generated for.
    #[arg(long, default_value = "first+3")]
    policy: ReferencePolicy,
    /// Sequence name recorded in the manifest (default: directory name).
    #[arg(long)]
    name: Option<String>,
}

/// Tracking knobs shared by `track` and `bench`.
#[derive(Args)]
struct TrackingOpts {
    /// How identities are carried across frames: residual, avg, or iou.
    #[arg(long, default_value_t = FlowMethod::Residual)]
    flow_method: FlowMethod,
    /// Center match threshold in pixels (default: a tenth of the diagonal).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Reference policy, e.g. first+3 or adj-1 (default: the manifest's).
    #[arg(long)]
    refs: Option<ReferencePolicy>,
    /// Pixel subsampling stride for flow estimation.
    #[arg(long, default_value_t = 1)]
    flow_stride: usize,
    /// Side length of the center suppression window (odd).
    #[arg(long, default_value_t = 41)]
    nms_window: usize,
    /// Minimum heatmap value for a center.
    #[arg(long, default_value_t = 0.15)]
    center_threshold: f64,
}

impl TrackingOpts {
    fn params(&self, manifest: &io::SequenceManifest) -> Result<PipelineParams> {
        let mut params = PipelineParams::for_image(manifest.height, manifest.width);
        params.grouping.nms_window = self.nms_window;
        params.grouping.center_threshold = self.center_threshold;
        if let Some(epsilon) = self.epsilon {
            params.matching.epsilon = epsilon;
        }
        params.matching.policy = match self.refs {
            Some(policy) => policy,
            None => manifest.policy()?,
        };
        params.matching.flow_stride = self.flow_stride;
        params.flow_method = self.flow_method;
        params.validate()?;
        Ok(params)
    }
}

#[derive(Args)]
struct TrackArgs {
    /// Input sequence directory.
    #[arg(long)]
    seq: PathBuf,
    /// Output results directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tracking: TrackingOpts,
}

#[derive(Args)]
struct EvalArgs {
    /// Results directory produced by `track`.
    #[arg(long)]
    results: PathBuf,
    /// Sequence directory holding the ground truth.
    #[arg(long)]
    seq: PathBuf,
    /// Also write the metrics to this TOML file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LossArgs {
    /// Directory of predicted maps.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of target maps; ground-truth labels come from here.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = LossWeights::default().lambda_cent)]
    lambda_cent: f64,
    #[arg(long, default_value_t = LossWeights::default().lambda_inter)]
    lambda_inter: f64,
    #[arg(long, default_value_t = LossWeights::default().lambda_intra)]
    lambda_intra: f64,
    #[arg(long, default_value_t = LossWeights::default().lambda_shape)]
    lambda_shape: f64,
    /// Also write the losses to this TOML file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// An identity map file, or a results directory to render in full.
    #[arg(long)]
    input: PathBuf,
    /// Output PNG file (map file input) or directory (results input).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Input sequence directory.
    #[arg(long)]
    seq: PathBuf,
    /// Timed repetitions after one warmup pass.
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[command(flatten)]
    tracking: TrackingOpts,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if cli.workers > 0 {
        pool = pool.num_threads(cli.workers);
    }
    pool.build_global()
        .context("initializing the worker pool")?;
    match cli.command {
        Command::Synth(args) => run_synth(args, cli.seed),
        Command::Track(args) => run_track(args),
        Command::Eval(args) => run_eval(args),
        Command::Loss(args) => run_loss(args),
        Command::Render(args) => run_render(args),
        Command::Bench(args) => run_bench(args),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

fn run_synth(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut scene: SceneSpec = read_toml(&args.scene, "scene description")?;
    if let Some(seed) = seed {
        scene.seed = seed;
    }
    let noise: Option<NoiseSpec> = args
        .noise
        .as_deref()
        .map(|p| read_toml(p, "noise description"))
        .transpose()?;

    let (mut frames, gt) = generate_sequence(&scene, args.policy)?;
    if let Some(noise) = &noise {
        frames = perturb_sequence(&frames, noise, scene.heatmap_sigma, scene.seed)?;
    }
    let name = match &args.name {
        Some(name) => name.clone(),
        None => args
            .out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into()),
    };
    io::save_sequence(
        &args.out,
        &name,
        &scene,
        noise.as_ref(),
        args.policy,
        &frames,
        &gt,
    )?;
    println!(
        "wrote {} frames ({}x{}, {} tracks) to {}",
        frames.len(),
        scene.height,
        scene.width,
        gt.tracks.len(),
        args.out.display()
    );
    Ok(())
}

fn run_track(args: TrackArgs) -> Result<()> {
    let manifest = io::load_sequence_manifest(&args.seq)?;
    let params = args.tracking.params(&manifest)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut state = PipelineState::new(params)?;
    let mut frames = Vec::with_capacity(manifest.num_frames);
    for t in 0..manifest.num_frames {
        let pred = io::load_frame(&args.seq, &manifest, t)?;
        let (ids, _) = state.process_frame(&pred)?;
        let file = io::frame_file_name(t, "ids");
        io::write_identity(&args.out.join(&file), &ids)?;
        frames.push(io::ResultFrame {
            index: t,
            ids: file,
        });
    }
    let tracks = state.finalize()?;
    let results = io::ResultsManifest {
        name: manifest.name.clone(),
        height: manifest.height,
        width: manifest.width,
        num_classes: manifest.num_classes,
        num_frames: manifest.num_frames,
        policy: params.matching.policy.to_string(),
        frames,
        tracks: tracks
            .iter()
            .map(|t| io::ResultTrack {
                global_id: t.global_id,
                class_index: t.class_index,
                confidence: t.confidence,
                score: t.score,
            })
            .collect(),
    };
    io::save_results_manifest(&args.out, &results)?;
    println!(
        "tracked {} frames, {} tracks, results in {}",
        manifest.num_frames,
        results.tracks.len(),
        args.out.display()
    );
    Ok(())
}

fn load_result_tracks(dir: &Path, results: &io::ResultsManifest) -> Result<Vec<Track>> {
    let mut maps = Vec::with_capacity(results.frames.len());
    for frame in &results.frames {
        maps.push(io::read_identity(&dir.join(&frame.ids))?);
    }
    let labels: BTreeMap<u32, (usize, f64)> = results
        .tracks
        .iter()
        .map(|t| (t.global_id, (t.class_index, t.score)))
        .collect();
    Ok(tracks_from_maps(&maps, &labels)?)
}

fn load_gt_tracks(dir: &Path, manifest: &io::SequenceManifest) -> Result<Vec<Track>> {
    let mut maps = Vec::with_capacity(manifest.num_frames);
    for t in 0..manifest.num_frames {
        let (ids, _) = io::load_gt_frame(dir, manifest, t)?
            .with_context(|| format!("sequence has no ground truth for frame {t}"))?;
        maps.push(ids);
    }
    let labels: BTreeMap<u32, (usize, f64)> = manifest
        .gt_tracks
        .iter()
        .map(|t| (t.id, (t.class_index, 1.0)))
        .collect();
    Ok(tracks_from_maps(&maps, &labels)?)
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let results = io::load_results_manifest(&args.results)?;
    let manifest = io::load_sequence_manifest(&args.seq)?;
    if (results.height, results.width) != (manifest.height, manifest.width)
        || results.num_frames != manifest.num_frames
    {
        bail!(
            "results are {}x{} over {} frames but the sequence is {}x{} over {}",
            results.height,
            results.width,
            results.num_frames,
            manifest.height,
            manifest.width,
            manifest.num_frames
        );
    }
    let preds = load_result_tracks(&args.results, &results)?;
    let gts = load_gt_tracks(&args.seq, &manifest)?;
    let metrics = average_precision(&preds, &gts, &IOU_THRESHOLDS);
    let switches = identity_switches(&preds, &gts);

    let text = format!(
        "ap = {}\nap50 = {}\nap75 = {}\nar1 = {}\nar10 = {}\nidentity_switches = {}\n",
        metrics.ap, metrics.ap50, metrics.ap75, metrics.ar1, metrics.ar10, switches
    );
    print!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run_loss(args: LossArgs) -> Result<()> {
    let pred_manifest = io::load_sequence_manifest(&args.pred)?;
    let gt_manifest = io::load_sequence_manifest(&args.gt)?;
    if (
        pred_manifest.height,
        pred_manifest.width,
        pred_manifest.num_frames,
    ) != (
        gt_manifest.height,
        gt_manifest.width,
        gt_manifest.num_frames,
    ) {
        bail!("prediction and target sequences have different geometry");
    }
    let weights = LossWeights {
        lambda_cent: args.lambda_cent,
        lambda_inter: args.lambda_inter,
        lambda_intra: args.lambda_intra,
        lambda_shape: args.lambda_shape,
    };
    weights.validate()?;

    let ones = ScalarMap::new(
        gt_manifest.height,
        gt_manifest.width,
        vec![1.0; gt_manifest.height * gt_manifest.width],
    )?;
    let mut sums = LossComponents::default();
    let mut ref_pairs = 0usize;
    for t in 0..gt_manifest.num_frames {
        let pred = io::load_frame(&args.pred, &pred_manifest, t)?;
        let gt = io::load_frame(&args.gt, &gt_manifest, t)?;
        let (_, gt_classes) = io::load_gt_frame(&args.gt, &gt_manifest, t)?
            .with_context(|| format!("target sequence has no ground truth for frame {t}"))?;
        let fg = foreground_weights(&gt_classes)?;

        sums.semantic += semantic_loss(&pred.semantic, &gt_classes)?;
        sums.center += center_loss(&pred.heatmap, &gt.heatmap, &ones)?;
        sums.intra += offset_loss(&pred.intra, &gt.intra, &fg)?;
        for (r, gt_inter) in gt.inter() {
            let pred_inter = pred.inter_offsets(*r)?;
            sums.inter += offset_loss(pred_inter, gt_inter, &fg)?;
            sums.shape += shape_loss(&pred.intra, pred_inter, &gt.intra, gt_inter, &fg)?;
            ref_pairs += 1;
        }
    }
    let frames = gt_manifest.num_frames as f64;
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
    let total = total_loss(&components, &weights)?;

    let text = format!(
        "semantic = {}\ncenter = {}\ninter = {}\nintra = {}\nshape = {}\ntotal = {}\n",
        components.semantic,
        components.center,
        components.inter,
        components.intra,
        components.shape,
        total
    );
    print!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

/// Weight 1 on instance pixels, 0 on background.
fn foreground_weights(classes: &ClassMap) -> Result<ScalarMap> {
    let data = classes
        .data()
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 })
        .collect();
    Ok(ScalarMap::new(classes.height(), classes.width(), data)?)
}

fn run_render(args: RenderArgs) -> Result<()> {
    if args.input.is_dir() {
        let results = io::load_results_manifest(&args.input)?;
        fs::create_dir_all(&args.out)
            .with_context(|| format!("creating {}", args.out.display()))?;
        for frame in &results.frames {
            let ids = io::read_identity(&args.input.join(&frame.ids))?;
            let file = format!("frame_{:05}_ids.png", frame.index);
            render::save_identity_png(&args.out.join(file), &ids)?;
        }
        println!(
            "rendered {} frames to {}",
            results.frames.len(),
            args.out.display()
        );
    } else {
        let ids = io::read_identity(&args.input)?;
        render::save_identity_png(&args.out, &ids)?;
        println!("rendered {}", args.out.display());
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let manifest = io::load_sequence_manifest(&args.seq)?;
    let params = args.tracking.params(&manifest)?;
    let frames: Vec<_> = (0..manifest.num_frames)
        .map(|t| io::load_frame(&args.seq, &manifest, t))
        .collect::<ifa::Result<_>>()?;
    let report = bench::run_benchmark(&frames, &params, args.repetitions)?;
    print!("{report}");
    Ok(())
}
