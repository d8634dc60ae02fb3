//! Analysis of what the single-step latents carry: PCA of per-frame latent
//! features, a success/failure probe, and causal interventions at named sites
//! of the inference chain.

mod pca;
mod probe;

use std::io::Write;

use crate::error::{ensure, Result};
use crate::lodiff::CLIP_FRAMES;
use crate::pipeline::{rollout_many, Intervention, InterventionKind, Mind, Mode, RolloutRecord};
use crate::pushworld::FRAME_PIXELS;

pub use pca::{pca, pca_2d, symmetric_eigen, Pca};
pub use probe::{auc, fit_logistic, fit_risk_probe, permutation_null, Confusion, LogisticProbe, ProbeConfig, ProbeMetrics};

/// Row-major feature rows with one success label, task id and group id
/// (the source rollout) per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub cols: usize,
    pub data: Vec<f64>,
    pub labels: Vec<bool>,
    pub tasks: Vec<usize>,
    pub groups: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(cols: usize) -> Self {
        Self { cols, data: Vec::new(), labels: Vec::new(), tasks: Vec::new(), groups: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn push(&mut self, row: &[f64], label: bool, task: usize, group: usize) -> Result<()> {
        ensure!(row.len() == self.cols, "row has {} values, expected {}", row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.labels.push(label);
        self.tasks.push(task);
        self.groups.push(group);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows();
        ensure!(self.data.len() == n * self.cols, "data length does not match {n} rows");
        ensure!(self.tasks.len() == n && self.groups.len() == n, "label, task and group counts differ");
        ensure!(self.data.iter().all(|v| v.is_finite()), "feature matrix contains non-finite values");
        Ok(())
    }
}

/// Where the per-frame vectors come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureSource {
    /// Frames of the single-step latent held in the record.
    #[default]
    Latent,
    /// Rendered frames actually observed over the replan's execution window.
    Pixels,
}

/// One row per frame of every replan cycle: the frame's 256 values followed
/// by the replan's matcher tokens averaged over frames. Labels are the
/// outcome of the episode.
pub fn extract_features(records: &[RolloutRecord], source: FeatureSource) -> Result<FeatureMatrix> {
    ensure!(!records.is_empty(), "no rollout records");
    let width = records[0].features.first().map_or(0, |f| f.shape()[1]);
    let mut x = FeatureMatrix::new(FRAME_PIXELS + width);
    for (gi, r) in records.iter().enumerate() {
        ensure!(
            r.latents.len() == r.replans && r.features.len() == r.replans && r.replans > 0,
            "record {gi} lacks latents or features for its {} replans",
            r.replans
        );
        let pooled = r.pooled_features();
        for (i, pooled) in pooled.iter().enumerate() {
            ensure!(pooled.len() == width, "record {gi} has feature width {}, expected {width}", pooled.len());
            for k in 0..CLIP_FRAMES {
                let mut row = Vec::with_capacity(x.cols);
                match source {
                    FeatureSource::Latent => {
                        row.extend_from_slice(&r.latents[i].data()[k * FRAME_PIXELS..(k + 1) * FRAME_PIXELS])
                    }
                    FeatureSource::Pixels => {
                        let last = r.frames.len() / FRAME_PIXELS - 1;
                        let f = (i * crate::pipeline::EXECUTE_PER_PLAN + k).min(last);
                        row.extend(r.frames[f * FRAME_PIXELS..(f + 1) * FRAME_PIXELS].iter().map(|&p| 2.0 * p as f64 - 1.0));
                    }
                }
                row.extend_from_slice(pooled);
                x.push(&row, r.success, r.task, gi)?;
            }
        }
    }
    x.validate()?;
    Ok(x)
}

/// Success rates with and without one intervention over the same seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionRow {
    pub kind: InterventionKind,
    pub magnitude: f64,
    pub rollouts: usize,
    pub baseline_successes: usize,
    pub intervened_successes: usize,
    pub baseline_sr: f64,
    pub intervened_sr: f64,
    /// `intervened_sr − baseline_sr`.
    pub delta: f64,
    /// Seeds that succeed only without the intervention, and the reverse.
    pub lost: usize,
    pub gained: usize,
    /// One-sided exact sign test over discordant seeds that the intervention
    /// lowers success.
    pub p_value: f64,
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    // log-space terms keep large n finite
    let ln_choose = |n: usize, r: usize| -> f64 { (1..=r).map(|i| ((n - r + i) as f64 / i as f64).ln()).sum() };
    let half = (0.5f64).ln() * n as f64;
    (k..=n).map(|i| (ln_choose(n, i) + half).exp()).sum::<f64>().min(1.0)
}

/// Rollout jobs: `n` seeds cycling through the tasks.
pub fn rollout_jobs(n: usize, seed: u64) -> Vec<(usize, u64)> {
    (0..n).map(|i| (i % crate::pushworld::NUM_TASKS, seed.wrapping_add(i as u64))).collect()
}

/// Compares `n` seeded single-step rollouts with and without `spec`. For
/// cross-episode injection each rollout borrows the baseline feature cache of
/// the next job in the list.
pub fn intervene(mind: &Mind, spec: &Intervention, n: usize, seed: u64, workers: usize) -> Result<(InterventionRow, Vec<RolloutRecord>)> {
    ensure!(n >= 20, "intervention study needs at least 20 rollouts, got {n}");
    let jobs = rollout_jobs(n, seed);
    let baseline = rollout_many(mind, &jobs, Mode::SingleStep, None, workers)?;
    let intervened = if spec.kind == InterventionKind::CrossEpisodeInjection {
        let mut out = Vec::with_capacity(n);
        for (j, &(task, s)) in jobs.iter().enumerate() {
            let mut iv = spec.clone();
            iv.donor = Some(baseline[(j + 1) % n].features.clone());
            out.extend(rollout_many(mind, &[(task, s)], Mode::SingleStep, Some(&iv), 1)?);
        }
        out
    } else {
        rollout_many(mind, &jobs, Mode::SingleStep, Some(spec), workers)?
    };
    let b = baseline.iter().filter(|r| r.success).count();
    let i = intervened.iter().filter(|r| r.success).count();
    let lost = baseline.iter().zip(&intervened).filter(|(b, i)| b.success && !i.success).count();
    let gained = baseline.iter().zip(&intervened).filter(|(b, i)| !b.success && i.success).count();
    let (bsr, isr) = (b as f64 / n as f64, i as f64 / n as f64);
    let row = InterventionRow {
        kind: spec.kind,
        magnitude: spec.magnitude,
        rollouts: n,
        baseline_successes: b,
        intervened_successes: i,
        baseline_sr: bsr,
        intervened_sr: isr,
        delta: isr - bsr,
        lost,
        gained,
        p_value: binomial_upper_tail(lost, lost + gained),
    };
    Ok((row, intervened))
}

/// `x,y,label,task` rows of the two-component projection.
pub fn write_pca_csv(mut out: impl Write, p: &Pca, x: &FeatureMatrix) -> Result<()> {
    writeln!(out, "x,y,label,task")?;
    for ((pt, &l), &t) in p.points.iter().zip(&x.labels).zip(&x.tasks) {
        writeln!(out, "{},{},{},{}", pt[0], pt.get(1).copied().unwrap_or(0.0), l as u8, t)?;
    }
    Ok(())
}

/// `metric,value` rows. The probe rows are left out when the records hold a
/// single outcome class and no probe could be fitted.
pub fn write_metrics_csv(mut out: impl Write, m: Option<&ProbeMetrics>, p: &Pca, null_aucs: &[f64]) -> Result<()> {
    writeln!(out, "metric,value")?;
    if let Some(m) = m {
        writeln!(out, "accuracy,{}", m.accuracy)?;
        writeln!(out, "auc,{}", m.auc)?;
        writeln!(out, "auc_fold_se,{}", m.auc_se)?;
        writeln!(out, "tp,{}", m.confusion.tp)?;
        writeln!(out, "fp,{}", m.confusion.fp)?;
        writeln!(out, "tn,{}", m.confusion.tn)?;
        writeln!(out, "fn,{}", m.confusion.fn_)?;
    }
    for (i, e) in p.explained.iter().enumerate() {
        writeln!(out, "explained_pc{},{}", i + 1, e)?;
    }
    if !null_aucs.is_empty() {
        writeln!(out, "null_auc_mean,{}", null_aucs.iter().sum::<f64>() / null_aucs.len() as f64)?;
    }
    Ok(())
}

/// `type,magnitude,baseline_sr,intervened_sr,delta` rows.
pub fn write_interventions_csv(mut out: impl Write, rows: &[InterventionRow]) -> Result<()> {
    writeln!(out, "type,magnitude,baseline_sr,intervened_sr,delta")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.kind, r.magnitude, r.baseline_sr, r.intervened_sr, r.delta)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_tail_values() {
        assert_eq!(binomial_upper_tail(0, 5), 1.0);
        assert!((binomial_upper_tail(5, 5) - 1.0 / 32.0).abs() < 1e-15);
        assert!((binomial_upper_tail(4, 5) - 6.0 / 32.0).abs() < 1e-15);
        assert_eq!(binomial_upper_tail(6, 5), 0.0);
    }
}
