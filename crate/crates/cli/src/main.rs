//! `wavjepa` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use wavjepa::checkpoint::{hex, Checkpoint};
use wavjepa::config::{Profile, RunConfig};
use wavjepa::eval::{extract_features, generalizability_score, generate_task, train_probe, ProbeConfig, ScoreTable, TaskKind};
use wavjepa::ingest::{read_manifest, write_clip};
use wavjepa::nat::{mix_scene, read_scene_manifest};
use wavjepa::sampler::{coverage_stats, SamplerConfig, StartRule};
use wavjepa::train::{checkpoint_path, load_training_clips, restore_model, TrainData, Trainer};

const DEVICE_VAR: &str = "WAVJEPA_DEVICE";

#[derive(Parser)]
#[command(name = "wavjepa", version, about = "Waveform joint-embedding predictive pretraining")]
#[command(subcommand_required = true, arg_required_else_help = true)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model on the clips listed in a manifest.
    Pretrain {
        /// TOML or JSON run config, merged over the profile defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Newline-delimited list of WAV files.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for metrics.jsonl and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// tiny, desk or paper; overrides the config's profile key.
        #[arg(long)]
        profile: Option<Profile>,
    },
    /// Render binaural scenes listed in a TSV manifest.
    MixScenes {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo statistics of the block sampler.
    SamplerStats {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.065)]
        p_context: f64,
        #[arg(long, default_value_t = 0.025)]
        p_target: f64,
        /// Block length, shared by context and target blocks.
        #[arg(long, default_value_t = 10)]
        m: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start rule: fixed_count or bernoulli.
        #[arg(long, default_value = "fixed_count")]
        start_rule: String,
    },
    /// Linear probe of a checkpoint on a synthetic task.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// tone4, am-vs-fm or noise-color.
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Clips per class; defaults to the checkpoint config's value.
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Normalized benchmark score of one model in a `model,task,score` table.
    Score {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "HEAR-Naive")]
        baseline: String,
    },
    /// Print a checkpoint's step, config hash and parameter counts.
    InspectCkpt { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).format_timestamp(None).init();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e.downcast_ref::<wavjepa::Error>().map_or("runtime", error_kind);
            let msg = format!("{e:#}");
            eprintln!("{}", json!({ "error": kind, "message": msg }));
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &wavjepa::Error) -> &'static str {
    use wavjepa::Error::*;
    match e {
        Io { .. } => "io",
        Decode { .. } | UnsupportedFormat { .. } | InvalidAudio(_) | TooShort { .. } | RateMismatch(..) | SilentNoise => "audio",
        NonFinite(_) | NonFiniteGradient(_) => "numeric",
        Sampling(_) | EmptyContext => "sampling",
        Shape(_) => "shape",
        Config(_) => "config",
        Checkpoint(_) => "checkpoint",
        ScoreTable(_) => "score_table",
        Probe(_) => "probe",
        Manifest(_) => "manifest",
    }
}

fn run(cli: Cli) -> anyhow::Result<Value> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Pretrain { config, manifest, out, resume, profile } => pretrain(config.as_deref(), &manifest, &out, resume.as_deref(), profile),
        Command::MixScenes { manifest, out } => mix_scenes(&manifest, &out),
        Command::SamplerStats { n, p_context, p_target, m, trials, seed, start_rule } => {
            let start_rule: StartRule = serde_json::from_value(Value::String(start_rule.clone()))
                .map_err(|_| wavjepa::Error::Config(vec![format!("start_rule: unknown rule {start_rule:?} (fixed_count, bernoulli)")]))?;
            let cfg = SamplerConfig { p_context, p_target, m_context: m, m_target: m, start_rule, ..SamplerConfig::default() };
            let errs = cfg.validate();
            if !errs.is_empty() {
                return Err(wavjepa::Error::Config(errs).into());
            }
            let stats = coverage_stats(&cfg, n, trials, seed)?;
            Ok(json!({ "config": cfg, "seed": seed, "stats": stats }))
        }
        Command::Probe { ckpt, task, seed, per_class } => probe(&ckpt, task, seed, per_class),
        Command::Score { table, model, baseline } => {
            let t = ScoreTable::from_csv(&table, &baseline)?;
            Ok(serde_json::to_value(generalizability_score(&t, &model)?)?)
        }
        Command::InspectCkpt { path } => inspect(&path),
    }
}

fn check_device() -> anyhow::Result<()> {
    match std::env::var(DEVICE_VAR) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => bail!("{DEVICE_VAR}={d:?} is not supported; only \"cpu\" is available"),
        _ => Ok(()),
    }
}

fn pretrain(config: Option<&Path>, manifest: &Path, out: &Path, resume: Option<&Path>, profile: Option<Profile>) -> anyhow::Result<Value> {
    check_device()?;
    let cfg = match config {
        Some(p) => Some(RunConfig::load(p, profile)?),
        None => profile.map(RunConfig::profile),
    };
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    let run_cfg = match (&cfg, &ckpt) {
        (Some(c), _) => c.clone(),
        (None, Some(k)) => RunConfig::from_json(&k.config_json)?,
        (None, None) => RunConfig::profile(Profile::Paper),
    };
    let clips = load_training_clips(&read_manifest(manifest)?, run_cfg.ingest.sample_rate)?;
    let data = TrainData::from_clips(clips, &run_cfg)?;
    let mut trainer = match &ckpt {
        Some(k) => Trainer::from_checkpoint(k, cfg.as_ref(), data)?,
        None => Trainer::new(run_cfg, data)?,
    };
    let start = trainer.state().step;
    let records = trainer.run(out)?;
    let end = trainer.state().step;
    Ok(json!({
        "start_step": start,
        "end_step": end,
        "final_loss": records.last().and_then(|r| r.loss),
        "metrics": out.join("metrics.jsonl"),
        "checkpoint": checkpoint_path(out, end),
    }))
}

fn mix_scenes(manifest: &Path, out: &Path) -> anyhow::Result<Value> {
    let entries = read_scene_manifest(manifest)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut scenes = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let mixed = mix_scene(&entry.load()?).with_context(|| format!("scene {i} ({})", entry.source.display()))?;
        let wav = out.join(format!("scene-{i:04}.wav"));
        write_clip(&wav, &mixed.clip)?;
        let sidecar = json!({
            "source": entry.source,
            "brir": entry.brir,
            "noises": entry.noises,
            "noise_brirs": entry.noise_brirs,
            "diffuse": entry.diffuse,
            "sample_rate": mixed.clip.sample_rate(),
            "samples": mixed.clip.len(),
            "report": mixed.report,
        });
        let side = wav.with_extension("json");
        std::fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n").with_context(|| format!("writing {}", side.display()))?;
        scenes.push(json!({ "wav": wav, "achieved_snr_db": mixed.report.achieved_snr_db }));
    }
    Ok(json!({ "scenes": scenes }))
}

fn probe(ckpt: &Path, task: TaskKind, seed: u64, per_class: Option<usize>) -> anyhow::Result<Value> {
    let (cfg, model, state) = restore_model(&Checkpoint::load(ckpt)?)?;
    let per_class = per_class.unwrap_or(cfg.eval.probe_clips_per_class);
    let t = generate_task(task, per_class, cfg.ingest.crop_seconds, cfg.ingest.sample_rate, seed);
    let features = extract_features(&model, &state, &t.clips)?;
    let pc = ProbeConfig { l2: cfg.eval.probe_l2, tol: cfg.eval.probe_tol, ..ProbeConfig::default() };
    let (_, mut report) = train_probe(&t, &features, &pc)?;
    report.task = task.to_string();
    Ok(json!({ "checkpoint_step": state.step, "seed": seed, "per_class": per_class, "report": report }))
}

fn inspect(path: &Path) -> anyhow::Result<Value> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::from_json(&ckpt.config_json)?;
    let groups: serde_json::Map<String, Value> =
        ckpt.groups.iter().map(|(name, store)| (name.clone(), json!({ "tensors": store.len(), "scalars": store.num_scalars() }))).collect();
    let count = |prefix: &str| ckpt.groups.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, s)| s.num_scalars()).sum::<usize>();
    Ok(json!({
        "step": ckpt.step,
        "seed": ckpt.seed,
        "config_hash": hex(&ckpt.hash()),
        "profile": cfg.profile,
        "params": {
            "wave_encoder": count("wave"),
            "context_encoder": count("context"),
            "target_encoder": count("target"),
            "predictor": count("predictor"),
        },
        "groups": groups,
    }))
}
