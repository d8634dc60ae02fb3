//! Wall-clock cost of one decision cycle (latent, features, action chunk) in
//! both inference modes.

use std::io::Write;
use std::time::Instant;

use super::{normalize_frame, Mind, Mode};
use crate::error::{ensure, Result};
use crate::numerics::{Rng, Tensor};
use crate::pushworld::{render, EnvState, FRAME_PIXELS, NUM_TASKS};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: Mode,
    pub median_ms: f64,
    pub p90_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub single: BenchRow,
    pub full: BenchRow,
    /// Full-video median over single-step median.
    pub ratio: f64,
}

/// Nearest-rank percentile of already sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn decide(mind: &Mind, mode: Mode, v0: &Tensor, task: usize, rng: &mut Rng) -> Result<()> {
    let cfg = &mind.config;
    let latent = match mode {
        Mode::SingleStep => mind.lodiff.single_step_latent(&mind.params, v0, task, rng)?,
        Mode::FullVideo => mind.lodiff.sample_video(&mind.params, v0, task, cfg.video_steps, cfg.video_cfg_scale, rng)?,
    };
    let z = mind.matcher.features(&mind.params, &latent.frames, latent.step)?;
    mind.hidiff.sample_actions(&mind.params, &z.tokens, task, cfg.action_steps, cfg.cfg_scale, rng)?;
    Ok(())
}

fn time_mode(mind: &Mind, mode: Mode, trials: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = Rng::new(seed).split(0xbe);
    let mut ms = Vec::with_capacity(trials);
    for k in 0..trials {
        let task = k % NUM_TASKS;
        let state = EnvState::random(task, &mut rng);
        let v0 = Tensor::new(&[FRAME_PIXELS], normalize_frame(&render(&state)))?;
        let start = Instant::now();
        decide(mind, mode, &v0, task, &mut rng)?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    Ok(BenchRow { mode, median_ms: median(&ms), p90_ms: percentile(&ms, 0.9) })
}

/// Times `trials` decisions per mode from random start states.
pub fn bench_latency(mind: &Mind, trials: usize, seed: u64) -> Result<BenchReport> {
    ensure!(trials >= 10, "benchmark needs at least 10 trials, got {trials}");
    let single = time_mode(mind, Mode::SingleStep, trials, seed)?;
    let full = time_mode(mind, Mode::FullVideo, trials, seed)?;
    let ratio = full.median_ms / single.median_ms;
    Ok(BenchReport { single, full, ratio })
}

/// CSV with header `mode,median_ms,p90_ms,ratio`; the ratio repeats on both rows.
pub fn write_bench_csv(mut out: impl Write, report: &BenchReport) -> Result<()> {
    writeln!(out, "mode,median_ms,p90_ms,ratio")?;
    for row in [&report.single, &report.full] {
        writeln!(out, "{},{:.4},{:.4},{:.4}", row.mode, row.median_ms, row.p90_ms, report.ratio)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(median(&xs), 5.5);
        assert_eq!(percentile(&xs, 0.9), 9.0);
        assert_eq!(median(&xs[..3]), 2.0);
    }
}
