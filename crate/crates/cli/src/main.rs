//! `mind`: every experiment of the workspace as a subcommand.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mind_core::pipeline::{
    bench_latency, load_checkpoint, read_records, rollout_many, save_checkpoint, train, write_bench_csv, write_loss_csv,
    write_records, Intervention, InterventionKind, MindConfig, Mode, CONFIG_KEYS,
};
use mind_core::pushworld::{generate_dataset, read_episodes, NUM_TASKS};
use mind_core::risk::{
    extract_features, fit_risk_probe, intervene, pca_2d, permutation_null, rollout_jobs, write_interventions_csv,
    write_metrics_csv, write_pca_csv, FeatureSource, ProbeConfig,
};
use mind_core::MindError;

#[derive(Parser, Debug)]
#[command(name = "mind", version, about = "Dual-rate diffusion world model on a desk-scale push task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct SeedArg {
    /// Seed for everything random in the command.
    #[arg(long, env = "MIND_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scripted-expert demonstrations.
    GenData {
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        /// Std of the Gaussian noise added to every expert action component.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Co-train the video generator, matcher and action policy.
    #[command(after_help = config_help())]
    Train {
        /// Episode file written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Config file of key=value lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set lambda_align=0 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory for model.mndc and loss.csv.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Closed-loop rollouts from a checkpoint.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of rollouts; tasks cycle through 0..4.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value = "singlestep")]
        mode: String,
        /// Optional intervention applied at every replan.
        #[arg(long)]
        intervention: Option<String>,
        #[arg(long)]
        magnitude: Option<f64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Decision latency of both inference modes.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// PCA and success probe over recorded rollouts.
    Risk {
        /// Rollout file written by the rollout command.
        #[arg(long)]
        records: PathBuf,
        /// Use observed pixels instead of latent frames.
        #[arg(long)]
        pixels: bool,
        /// Label shuffles for the permutation null.
        #[arg(long, default_value_t = 20)]
        shuffles: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Success rate with and without interventions at named pipeline sites.
    Intervene {
        #[arg(long)]
        ckpt: PathBuf,
        /// Intervention type, or "all".
        #[arg(long = "type", default_value = "all")]
        kind: String,
        #[arg(long)]
        magnitude: Option<f64>,
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "interventions.csv")]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Print the header of a checkpoint, episode or rollout file.
    Inspect { path: PathBuf },
}

fn config_help() -> String {
    let mut s = String::from("Config keys (config file or --set):\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<18} {d}\n"));
    }
    s
}

/// Failure of a command: usage errors exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(MindError),
}

impl From<MindError> for Failure {
    fn from(e: MindError) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Contract violations from argument-driven calls are usage errors; I/O and
/// format failures stay runtime errors.
fn usage<T>(r: mind_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        MindError::Contract(_) => Failure::Usage(e.to_string()),
        e => Failure::Runtime(e),
    })
}

fn seed_of(s: SeedArg) -> u64 {
    s.seed.unwrap_or(0)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn parse_intervention(kind: &str, magnitude: Option<f64>, seed: u64) -> Result<Intervention, Failure> {
    let kind: InterventionKind = usage(kind.parse())?;
    usage(Intervention::new(kind, magnitude.unwrap_or(kind.default_magnitude()), seed))
}

fn build_config(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<MindConfig, Failure> {
    let mut cfg = MindConfig::default();
    if let Some(path) = config {
        usage(cfg.apply_text(&fs::read_to_string(path)?))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for kv in overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")));
        };
        usage(cfg.set(k.trim(), v.trim()))?;
    }
    usage(cfg.validate())?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { episodes, noise, out, seed } => {
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let summary = usage(generate_dataset(episodes, seed_of(seed), noise, &out))?;
            println!(
                "wrote {} episodes to {}: {} successes, {} failures ({:.1}% success)",
                summary.episodes,
                out.display(),
                summary.successes,
                summary.failures,
                100.0 * summary.success_rate()
            );
        }
        Command::Train { data, config, overrides, out_dir, seed } => {
            let cfg = build_config(config.as_deref(), &overrides, seed.seed)?;
            let total = cfg.steps;
            let mut n = 0;
            let (mind, history) = train(&cfg, &data, |r| {
                n += 1;
                if n % 100 == 0 || n == total {
                    eprintln!(
                        "step {n}/{total}: video {:.4} action {:.4} align {:.4} total {:.4}",
                        r.video, r.action, r.align, r.total
                    );
                }
            })?;
            fs::create_dir_all(&out_dir)?;
            save_checkpoint(&mind, &out_dir.join("model.mndc"))?;
            let mut csv = create(&out_dir.join("loss.csv"))?;
            write_loss_csv(&mut csv, &history)?;
            csv.flush()?;
            println!("wrote {} and {}", out_dir.join("model.mndc").display(), out_dir.join("loss.csv").display());
        }
        Command::Rollout { ckpt, episodes, mode, intervention, magnitude, workers, out, seed } => {
            let mode: Mode = usage(mode.parse())?;
            let seed = seed_of(seed);
            let iv = intervention.map(|k| parse_intervention(&k, magnitude, seed)).transpose()?;
            if iv.as_ref().is_some_and(|i| i.kind == InterventionKind::CrossEpisodeInjection) {
                return Err(Failure::Usage("cross_episode_injection needs donor rollouts; use the intervene command".into()));
            }
            let mind = load_checkpoint(&ckpt)?;
            let records = rollout_many(&mind, &rollout_jobs(episodes, seed), mode, iv.as_ref(), workers)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_records(&out, &records)?;
            let ok = records.iter().filter(|r| r.success).count();
            println!("{mode}: {ok}/{} successful ({:.1}%)", records.len(), 100.0 * ok as f64 / records.len().max(1) as f64);
            for task in 0..NUM_TASKS {
                let of_task: Vec<_> = records.iter().filter(|r| r.task == task).collect();
                let ok = of_task.iter().filter(|r| r.success).count();
                println!("  task {task}: {ok}/{}", of_task.len());
            }
        }
        Command::Bench { ckpt, trials, out, seed } => {
            let mind = load_checkpoint(&ckpt)?;
            let report = usage(bench_latency(&mind, trials, seed_of(seed)))?;
            let mut csv = create(&out)?;
            write_bench_csv(&mut csv, &report)?;
            csv.flush()?;
            println!(
                "singlestep {:.2} ms, fullvideo {:.2} ms, ratio {:.2}",
                report.single.median_ms, report.full.median_ms, report.ratio
            );
        }
        Command::Risk { records, pixels, shuffles, out_dir, seed } => {
            let records = read_records(&records)?;
            let source = if pixels { FeatureSource::Pixels } else { FeatureSource::Latent };
            let x = extract_features(&records, source)?;
            let pca = pca_2d(&x)?;
            let cfg = ProbeConfig { seed: seed_of(seed), ..ProbeConfig::default() };
            let successes = records.iter().filter(|r| r.success).count();
            let probe = if successes == 0 || successes == records.len() {
                eprintln!("all {} rollouts share one outcome; skipping the success probe", records.len());
                None
            } else {
                Some((fit_risk_probe(&x, &cfg)?, permutation_null(&x, shuffles, &cfg)?))
            };
            fs::create_dir_all(&out_dir)?;
            let mut f = create(&out_dir.join("pca_points.csv"))?;
            write_pca_csv(&mut f, &pca, &x)?;
            f.flush()?;
            let mut f = create(&out_dir.join("risk_metrics.csv"))?;
            let null = probe.as_ref().map_or(&[][..], |(_, n)| &n[..]);
            write_metrics_csv(&mut f, probe.as_ref().map(|(m, _)| m), &pca, null)?;
            f.flush()?;
            print!("{} rows; PCA explained {:.3}/{:.3}", x.rows(), pca.explained[0], pca.explained[1]);
            match &probe {
                Some((m, null)) => {
                    let null_mean = null.iter().sum::<f64>() / null.len().max(1) as f64;
                    println!(
                        "; probe AUC {:.3} (fold SE {:.3}), accuracy {:.3}; shuffled-label AUC {null_mean:.3}",
                        m.auc, m.auc_se, m.accuracy
                    );
                }
                None => println!(),
            }
        }
        Command::Intervene { ckpt, kind, magnitude, rollouts, workers, out, seed } => {
            let seed = seed_of(seed);
            let kinds: Vec<InterventionKind> =
                if kind == "all" { InterventionKind::ALL.to_vec() } else { vec![usage(kind.parse())?] };
            let specs =
                kinds.iter().map(|k| parse_intervention(k.as_str(), magnitude, seed)).collect::<Result<Vec<_>, _>>()?;
            let mind = load_checkpoint(&ckpt)?;
            let mut rows = Vec::new();
            for spec in &specs {
                let (row, _) = usage(intervene(&mind, spec, rollouts, seed, workers))?;
                println!(
                    "{}: baseline {:.3} intervened {:.3} delta {:+.3} (one-sided p {:.4})",
                    row.kind, row.baseline_sr, row.intervened_sr, row.delta, row.p_value
                );
                rows.push(row);
            }
            let mut csv = create(&out)?;
            write_interventions_csv(&mut csv, &rows)?;
            csv.flush()?;
        }
        Command::Inspect { path } => inspect(&path)?,
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let bytes = fs::read(path)?;
    match bytes.get(..4) {
        Some(b"MNDC") => {
            let mind = load_checkpoint(path)?;
            println!("checkpoint {}: step {}, {} tensors, {} scalars", path.display(), mind.step, mind.params.len(), mind.params.num_scalars());
            for prefix in ["lodiff.", "matcher.", "hidiff."] {
                let n: usize = mind.params.iter().filter(|(_, name, _)| name.starts_with(prefix)).map(|(_, _, t)| t.numel()).sum();
                println!("  {prefix:<9} {n} scalars");
            }
            print!("{}", mind.config.to_text());
        }
        Some(b"MND1") => {
            let episodes = read_episodes(path)?;
            let ok = episodes.iter().filter(|e| e.success).count();
            println!("episode file {}: {} episodes, {ok} successful", path.display(), episodes.len());
            for task in 0..NUM_TASKS {
                println!("  task {task}: {} episodes", episodes.iter().filter(|e| e.task == task).count());
            }
        }
        Some(b"MNDR") => {
            let records = read_records(path)?;
            let ok = records.iter().filter(|r| r.success).count();
            let replans: usize = records.iter().map(|r| r.replans).sum();
            println!("rollout file {}: {} records, {ok} successful, {replans} replans", path.display(), records.len());
        }
        _ => return Err(Failure::Runtime(MindError::Format(format!("{}: unrecognized file type", path.display())))),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
