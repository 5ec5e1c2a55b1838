//! Wall-clock measurement of the assembly stages, reported per frame.

use std::fmt;
use std::time::Duration;

use crate::maps::FramePrediction;
use crate::pipeline::{run_on_frames, FrameTiming, PipelineParams};
use crate::{Error, Result};

/// Mean per-frame wall time of each stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageMeans {
    pub grouping: Duration,
    pub flow: Duration,
    pub matching: Duration,
    pub labeling: Duration,
    pub total: Duration,
}

impl StageMeans {
    pub fn from_timings(timings: &[FrameTiming]) -> Self {
        if timings.is_empty() {
            return Self::default();
        }
        let n = timings.len() as u32;
        let sum = |f: fn(&FrameTiming) -> Duration| timings.iter().map(f).sum::<Duration>() / n;
        Self {
            grouping: sum(|t| t.grouping),
            flow: sum(|t| t.flow),
            matching: sum(|t| t.matching),
            labeling: sum(|t| t.labeling),
            total: sum(FrameTiming::total),
        }
    }
}

/// The outcome of one benchmark: per-frame stage means over every
/// repetition, and those of the fastest repetition alone.
#[derive(Debug, Clone, Copy)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub repetitions: usize,
    /// Rayon threads observed while running.
    pub workers: usize,
    pub mean: StageMeans,
    pub best: StageMeans,
}

fn ms(d: Duration) -> String {
    format!("{:9.3} ms", d.as_secs_f64() * 1e3)
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "assembly: {}x{}, {} frames, {} repetitions, {} workers",
            self.height, self.width, self.frames, self.repetitions, self.workers
        )?;
        writeln!(
            f,
            "{:<10} {:>12} {:>12}",
            "stage", "mean/frame", "best/frame"
        )?;
        for (name, mean, best) in [
            ("grouping", self.mean.grouping, self.best.grouping),
            ("flow", self.mean.flow, self.best.flow),
            ("matching", self.mean.matching, self.best.matching),
            ("labeling", self.mean.labeling, self.best.labeling),
            ("total", self.mean.total, self.best.total),
        ] {
            writeln!(f, "{name:<10} {} {}", ms(mean), ms(best))?;
        }
        Ok(())
    }
}

/// Runs the pipeline `repetitions` times over the same frames (after one
/// untimed warmup pass) and aggregates the stage timings. Nothing is
/// written anywhere; the report is the only product.
pub fn run_benchmark(
    frames: &[FramePrediction],
    params: &PipelineParams,
    repetitions: usize,
) -> Result<BenchReport> {
    if frames.is_empty() {
        return Err(Error::InvalidParameter("nothing to benchmark".into()));
    }
    if repetitions == 0 {
        return Err(Error::InvalidParameter(
            "benchmark needs at least one repetition".into(),
        ));
    }
    run_on_frames(frames, params)?;

    let mut all = Vec::with_capacity(repetitions * frames.len());
    let mut best: Option<StageMeans> = None;
    for _ in 0..repetitions {
        let output = run_on_frames(frames, params)?;
        let rep = StageMeans::from_timings(&output.timings);
        if best.is_none_or(|b| rep.total < b.total) {
            best = Some(rep);
        }
        all.extend(output.timings);
    }
    Ok(BenchReport {
        height: frames[0].height(),
        width: frames[0].width(),
        frames: frames.len(),
        repetitions,
        workers: rayon::current_num_threads(),
        mean: StageMeans::from_timings(&all),
        best: best.unwrap(),
    })
}
