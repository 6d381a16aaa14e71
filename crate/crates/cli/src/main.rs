use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use occvlm::harness::pipeline::{self, CheckpointSet};
use occvlm::harness::report::{self, Timing};
use occvlm::harness::{configure_threads, EvalMode, ReportFormat, RunConfig};
use occvlm::synth::dataset::{generate_dataset, load_split, DatasetSpec};

#[derive(Parser)]
#[command(name = "occ-vlm", about = "Occlusion-aware VLM pipeline on synthetic hand-object scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a seeded synthetic dataset into OUT/train and OUT/test.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training instances.
        #[arg(long, default_value_t = 500)]
        scenes: usize,
        /// Held-out instances; a fifth of --scenes when omitted.
        #[arg(long)]
        test_scenes: Option<usize>,
        #[arg(long, default_value_t = 2)]
        views: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: contrastive CLIP pretraining, then LM and fusion fine-tuning.
    TrainVlm {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stage 2: SDF reconstruction training.
    TrainSdf {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stage 3: per-sample test-time adaptation followed by evaluation.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint_dir: PathBuf,
    },
    /// Evaluate trained checkpoints without adaptation.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<EvalMode>,
        /// Written as CSV when the extension is .csv, JSON otherwise.
        #[arg(long)]
        report_out: PathBuf,
        /// Checkpoints to read; defaults to the config's out_dir.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Re-render a JSON report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(config: &Path, stage: u8) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.stages = [stage].into();
    let out = pipeline::run_pipeline(&cfg)?;
    for p in &out.checkpoints {
        println!("wrote {}", p.display());
    }
    let trace = if stage == 1 { &out.stage1_trace } else { &out.stage2_trace };
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("loss {first:.4} -> {last:.4} over {} steps", trace.len());
    }
    Ok(())
}

fn print_summary(r: &occvlm::harness::EvalReport) {
    for a in &r.per_instruction {
        println!("instruction {}: {}/{} = {:.4}", a.instruction, a.correct, a.total, a.accuracy);
    }
    if let Some(b) = &r.rescue {
        println!("rescued {}/{} ({})", b.rescued, b.total, b.increment_display());
    }
}

fn main() -> Result<()> {
    configure_threads()?;
    match Cli::parse().command {
        Command::GenData {
            seed,
            scenes,
            test_scenes,
            views,
            out,
        } => {
            let mut spec = DatasetSpec {
                seed,
                train_instances: scenes,
                test_instances: test_scenes.unwrap_or((scenes / 5).max(1)),
                ..DatasetSpec::default()
            };
            spec.scene.num_views = views;
            let (train, test) = generate_dataset(&out, &spec)?;
            println!(
                "wrote {} train and {} test records under {}",
                train.records.len(),
                test.records.len(),
                out.display()
            );
        }
        Command::TrainVlm { config } => run_stage(&config, 1)?,
        Command::TrainSdf { config } => run_stage(&config, 2)?,
        Command::Adapt { config, checkpoint_dir } => {
            let cfg = load_config(&config)?;
            if cfg.tta.steps == 0 {
                bail!("tta.steps is 0; use `eval` for unadapted evaluation");
            }
            std::fs::create_dir_all(&cfg.out_dir)?;
            let mut timing = Timing {
                fingerprint: cfg.fingerprint(),
                phases: Vec::new(),
            };
            let r = pipeline::run_stage3(&cfg, &checkpoint_dir, &mut timing)?;
            timing.write(&cfg.out_dir.join(pipeline::TIMING_FILE))?;
            print_summary(&r);
        }
        Command::Eval {
            config,
            mode,
            report_out,
            checkpoint_dir,
        } => {
            let cfg = load_config(&config)?;
            let mode = mode.unwrap_or(cfg.eval.mode);
            let dir = checkpoint_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let ck = CheckpointSet::load(&dir, &cfg)?;
            let (_, test) = load_split(&cfg.test_dir)?;
            let (r, _) = pipeline::evaluate(&ck, &test, &cfg, mode, None)?;
            let format = match report_out.extension().and_then(|e| e.to_str()) {
                Some("csv") => ReportFormat::Csv,
                _ => ReportFormat::Json,
            };
            report::emit_report(&r, format, &report_out)?;
            print_summary(&r);
        }
        Command::Report { input, format } => {
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            print!("{}", report::render(&report::from_json(&text)?, format)?);
        }
    }
    Ok(())
}
