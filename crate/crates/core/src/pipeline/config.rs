//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::diffmatcher::MatcherConfig;
use crate::error::{contract, ensure, Result};
use crate::hidiff::HiDiffConfig;
use crate::lodiff::LoDiffConfig;
use crate::schedulers::{Parameterization, ScheduleConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct MindConfig {
    pub seed: u64,
    pub lambda_v: f64,
    pub lambda_a: f64,
    pub lambda_align: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub use_video_loss: bool,
    pub use_action_loss: bool,
    pub use_align_loss: bool,
    pub freeze_lodiff: bool,
    pub tprime: usize,
    pub tdoubleprime: usize,
    pub video_beta_start: f64,
    pub video_beta_end: f64,
    pub action_beta_start: f64,
    pub action_beta_end: f64,
    pub video_dim: usize,
    pub video_layers: usize,
    pub video_heads: usize,
    pub matcher_hidden: usize,
    pub matcher_proj: usize,
    pub matcher_layers: usize,
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub cond_drop: f64,
    pub cfg_scale: f64,
    pub video_cfg_scale: f64,
    pub action_steps: usize,
    pub video_steps: usize,
}

impl Default for MindConfig {
    fn default() -> Self {
        let slow = ScheduleConfig::slow();
        let fast = ScheduleConfig::fast();
        let lod = LoDiffConfig::default();
        let mat = MatcherConfig::default();
        let hid = HiDiffConfig::default();
        Self {
            seed: 0,
            lambda_v: 1.0,
            lambda_a: 1.0,
            lambda_align: 0.5,
            batch: 16,
            steps: 2000,
            lr: 1e-3,
            warmup: 100,
            weight_decay: 0.01,
            grad_clip: 0.5,
            use_video_loss: true,
            use_action_loss: true,
            use_align_loss: true,
            freeze_lodiff: false,
            tprime: slow.steps,
            tdoubleprime: fast.steps,
            video_beta_start: slow.beta_start,
            video_beta_end: slow.beta_end,
            action_beta_start: fast.beta_start,
            action_beta_end: fast.beta_end,
            video_dim: lod.dim,
            video_layers: lod.layers,
            video_heads: lod.heads,
            matcher_hidden: mat.hidden,
            matcher_proj: mat.proj,
            matcher_layers: mat.layers,
            depth: hid.depth,
            hidden: hid.hidden,
            heads: hid.heads,
            cond_drop: hid.cond_drop,
            cfg_scale: hid.cfg_scale,
            video_cfg_scale: lod.guidance,
            action_steps: hid.sample_steps,
            video_steps: lod.sample_steps,
        }
    }
}

/// Every key accepted in a config file or by `--set`, with a short description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "global seed for initialization, batches and noise"),
    ("lambda_v", "weight of the video loss"),
    ("lambda_a", "weight of the action loss"),
    ("lambda_align", "weight of the alignment loss"),
    ("batch", "clips per training step"),
    ("steps", "training steps"),
    ("lr", "peak learning rate"),
    ("warmup", "linear warmup steps"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("grad_clip", "global gradient-norm clip"),
    ("use_video_loss", "train with the video loss (true/false)"),
    ("use_action_loss", "train with the action loss (true/false)"),
    ("use_align_loss", "train with the alignment loss (true/false)"),
    ("freeze_lodiff", "keep video-generator parameters fixed (true/false)"),
    ("tprime", "video diffusion steps"),
    ("tdoubleprime", "action diffusion steps"),
    ("video_beta_start", "first beta of the video schedule"),
    ("video_beta_end", "last beta of the video schedule"),
    ("action_beta_start", "first beta of the action schedule"),
    ("action_beta_end", "last beta of the action schedule"),
    ("video_dim", "video transformer token width"),
    ("video_layers", "video transformer layers"),
    ("video_heads", "video transformer attention heads"),
    ("matcher_hidden", "matcher hidden width"),
    ("matcher_proj", "matcher output token width"),
    ("matcher_layers", "matcher encoder layers"),
    ("depth", "action transformer blocks"),
    ("hidden", "action transformer width"),
    ("heads", "action transformer attention heads"),
    ("cond_drop", "condition-drop probability for guidance training"),
    ("cfg_scale", "guidance scale for action sampling"),
    ("video_cfg_scale", "guidance scale for full video sampling"),
    ("action_steps", "DDIM steps per action chunk"),
    ("video_steps", "DDIM steps for full video sampling"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    match value.trim().parse() {
        Ok(v) => Ok(v),
        Err(_) => contract!("invalid value {value:?} for {key}"),
    }
}

impl MindConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "lambda_v" => self.lambda_v = parse(key, value)?,
            "lambda_a" => self.lambda_a = parse(key, value)?,
            "lambda_align" => self.lambda_align = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "use_video_loss" => self.use_video_loss = parse(key, value)?,
            "use_action_loss" => self.use_action_loss = parse(key, value)?,
            "use_align_loss" => self.use_align_loss = parse(key, value)?,
            "freeze_lodiff" => self.freeze_lodiff = parse(key, value)?,
            "tprime" => self.tprime = parse(key, value)?,
            "tdoubleprime" => self.tdoubleprime = parse(key, value)?,
            "video_beta_start" => self.video_beta_start = parse(key, value)?,
            "video_beta_end" => self.video_beta_end = parse(key, value)?,
            "action_beta_start" => self.action_beta_start = parse(key, value)?,
            "action_beta_end" => self.action_beta_end = parse(key, value)?,
            "video_dim" => self.video_dim = parse(key, value)?,
            "video_layers" => self.video_layers = parse(key, value)?,
            "video_heads" => self.video_heads = parse(key, value)?,
            "matcher_hidden" => self.matcher_hidden = parse(key, value)?,
            "matcher_proj" => self.matcher_proj = parse(key, value)?,
            "matcher_layers" => self.matcher_layers = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "cond_drop" => self.cond_drop = parse(key, value)?,
            "cfg_scale" => self.cfg_scale = parse(key, value)?,
            "video_cfg_scale" => self.video_cfg_scale = parse(key, value)?,
            "action_steps" => self.action_steps = parse(key, value)?,
            "video_steps" => self.video_steps = parse(key, value)?,
            _ => {
                let keys: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
                contract!("unknown config key {key:?}; valid keys: {}", keys.join(", "))
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                contract!("line {}: expected key=value, got {line:?}", n + 1);
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; [`MindConfig::from_text`] restores it exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        put("seed", self.seed.to_string());
        put("lambda_v", self.lambda_v.to_string());
        put("lambda_a", self.lambda_a.to_string());
        put("lambda_align", self.lambda_align.to_string());
        put("batch", self.batch.to_string());
        put("steps", self.steps.to_string());
        put("lr", self.lr.to_string());
        put("warmup", self.warmup.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("use_video_loss", self.use_video_loss.to_string());
        put("use_action_loss", self.use_action_loss.to_string());
        put("use_align_loss", self.use_align_loss.to_string());
        put("freeze_lodiff", self.freeze_lodiff.to_string());
        put("tprime", self.tprime.to_string());
        put("tdoubleprime", self.tdoubleprime.to_string());
        put("video_beta_start", self.video_beta_start.to_string());
        put("video_beta_end", self.video_beta_end.to_string());
        put("action_beta_start", self.action_beta_start.to_string());
        put("action_beta_end", self.action_beta_end.to_string());
        put("video_dim", self.video_dim.to_string());
        put("video_layers", self.video_layers.to_string());
        put("video_heads", self.video_heads.to_string());
        put("matcher_hidden", self.matcher_hidden.to_string());
        put("matcher_proj", self.matcher_proj.to_string());
        put("matcher_layers", self.matcher_layers.to_string());
        put("depth", self.depth.to_string());
        put("hidden", self.hidden.to_string());
        put("heads", self.heads.to_string());
        put("cond_drop", self.cond_drop.to_string());
        put("cfg_scale", self.cfg_scale.to_string());
        put("video_cfg_scale", self.video_cfg_scale.to_string());
        put("action_steps", self.action_steps.to_string());
        put("video_steps", self.video_steps.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lambda_v", self.lambda_v), ("lambda_a", self.lambda_a), ("lambda_align", self.lambda_align)] {
            ensure!(w >= 0.0 && w.is_finite(), "{name} must be finite and non-negative, got {w}");
        }
        ensure!(
            self.use_video_loss || self.use_action_loss || self.use_align_loss,
            "at least one loss must be enabled"
        );
        ensure!(self.batch >= 1, "batch must be at least 1");
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), "lr must be finite and non-negative");
        ensure!(self.grad_clip > 0.0, "grad_clip must be positive");
        ensure!((0.0..=1.0).contains(&self.cond_drop), "cond_drop must be in [0, 1]");
        ensure!(self.cfg_scale >= 0.0 && self.video_cfg_scale >= 0.0, "guidance scales must be non-negative");
        ensure!(self.tprime >= 2 && self.tdoubleprime >= 1, "diffusion step counts too small");
        ensure!(self.video_steps >= 1 && self.video_steps <= self.tprime, "video_steps must be in 1..=tprime");
        ensure!(self.action_steps >= 1 && self.action_steps <= self.tdoubleprime, "action_steps must be in 1..=tdoubleprime");
        Ok(())
    }

    pub fn slow_schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.tprime,
            beta_start: self.video_beta_start,
            beta_end: self.video_beta_end,
            zero_snr: true,
            parameterization: Parameterization::Velocity,
        }
    }

    pub fn fast_schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.tdoubleprime,
            beta_start: self.action_beta_start,
            beta_end: self.action_beta_end,
            zero_snr: false,
            parameterization: Parameterization::Epsilon,
        }
    }

    pub fn lodiff(&self) -> LoDiffConfig {
        LoDiffConfig {
            dim: self.video_dim,
            layers: self.video_layers,
            heads: self.video_heads,
            mlp_hidden: 2 * self.video_dim,
            guidance: self.video_cfg_scale,
            cond_drop: self.cond_drop,
            sample_steps: self.video_steps,
            schedule: self.slow_schedule(),
            ..LoDiffConfig::default()
        }
    }

    pub fn matcher(&self) -> MatcherConfig {
        MatcherConfig {
            hidden: self.matcher_hidden,
            embed: self.matcher_hidden,
            proj: self.matcher_proj,
            layers: self.matcher_layers,
            ..MatcherConfig::default()
        }
    }

    pub fn hidiff(&self) -> HiDiffConfig {
        HiDiffConfig {
            depth: self.depth,
            hidden: self.hidden,
            heads: self.heads,
            cond_drop: self.cond_drop,
            cfg_scale: self.cfg_scale,
            sample_steps: self.action_steps,
            cond_dim: self.matcher_proj,
            schedule: self.fast_schedule(),
            ..HiDiffConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = MindConfig::default();
        c.lr = 3.3e-4;
        c.freeze_lodiff = true;
        c.video_beta_start = 0.00085;
        assert_eq!(MindConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_key_is_settable_and_listed() {
        let text = MindConfig::default().to_text();
        let written: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let listed: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
        assert_eq!(written, listed);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = MindConfig::default().set("lamda_v", "1").unwrap_err().to_string();
        assert!(err.contains("lambda_v") && err.contains("freeze_lodiff"));
    }

    #[test]
    fn all_losses_disabled_rejected() {
        let text = "use_video_loss=false\nuse_action_loss=false\nuse_align_loss=false\n";
        assert!(MindConfig::from_text(text).is_err());
    }
}
