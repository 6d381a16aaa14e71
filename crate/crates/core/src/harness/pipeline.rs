use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use super::config::{EvalMode, RunConfig};
use super::eval::{evaluate_with, rescue_analysis, EvalReport, VlmAnswerer};
use super::report::{emit_report, ReportFormat, Timing};
use super::train::{stage1_finetune, stage2_train_sdf, vlm_config};
use crate::clip::{ClipConfig, ClipModel};
use crate::error::{Error, Result};
use crate::lm::Vlm;
use crate::numerics::ParamStore;
use crate::recon::ReconModel;
use crate::synth::dataset::{load_split, LoadedScene};
use crate::text::Vocab;
use crate::tta::{write_trace, TtaConfig};

pub const STAGE1_CKPT: &str = "stage1.ckpt.json";
pub const STAGE2_CKPT: &str = "stage2.ckpt.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const STAGE1_TRACE: &str = "stage1_loss.json";
pub const STAGE2_TRACE: &str = "stage2_loss.json";
pub const TTA_TRACE: &str = "tta_trace.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "OCC_VLM_THREADS";

/// Sizes the global worker pool from [`THREADS_ENV`]; returns the cap if one was set.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // A pool built earlier in the process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

#[derive(Serialize)]
struct LossTrace<'a> {
    fingerprint: &'a str,
    traces: Vec<(&'a str, &'a [f64])>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_trace_file(path: &Path, fingerprint: &str, traces: Vec<(&str, &[f64])>) -> Result<()> {
    write_text(path, &serde_json::to_string(&LossTrace { fingerprint, traces })?)
}

/// Trained models needed by evaluation and adaptation.
pub struct CheckpointSet {
    pub vocab: Vocab,
    pub clip: ClipModel,
    pub vlm: Vlm,
    pub recon: Option<ReconModel>,
}

fn require(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Config(format!("{what} needs missing artifact {}", path.display())))
    }
}

impl CheckpointSet {
    /// Loads stage-1 artifacts from `dir`, and stage 2 when present.
    pub fn load(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let ckpt_path = require(dir.join(STAGE1_CKPT), "evaluation")?;
        let vocab_path = require(dir.join(VOCAB_FILE), "evaluation")?;
        let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab = Vocab::from_json(&text)?;
        let store = ParamStore::load(&ckpt_path)?;
        let clip = ClipModel::from_params(ClipConfig::new(vocab.len()), store.subset("clip."))?;
        let mut vstore = store.subset("lm.");
        vstore.extend(store.subset("fusion."));
        let vlm = Vlm::from_params(vlm_config(cfg, &vocab, &clip), vstore)?;
        let recon_path = dir.join(STAGE2_CKPT);
        let recon = if recon_path.is_file() {
            Some(ReconModel::from_params(cfg.recon.clone(), ParamStore::load(&recon_path)?)?)
        } else {
            None
        };
        Ok(CheckpointSet {
            vocab,
            clip,
            vlm,
            recon,
        })
    }
}

/// Whether `mode` at the configured alpha consults the reconstruction path.
pub fn needs_recon(mode: EvalMode, alpha: f64) -> bool {
    match mode {
        EvalMode::Baseline => false,
        EvalMode::Fused => alpha != 1.0,
        EvalMode::ReconDescribe => true,
    }
}

fn answerer<'a>(ck: &'a CheckpointSet, cfg: &RunConfig, mode: EvalMode, tta: Option<&TtaConfig>) -> VlmAnswerer<'a> {
    VlmAnswerer {
        vlm: &ck.vlm,
        clip: &ck.clip,
        recon: ck.recon.as_ref(),
        vocab: &ck.vocab,
        mode,
        alpha: cfg.fusion.alpha,
        grid_resolution: cfg.eval.grid_resolution,
        decode: cfg.decode.clone(),
        tta: tta.cloned(),
        trace: Mutex::new(Vec::new()),
    }
}

/// Evaluation in `mode`, optionally adapting per sample. The recon-describe
/// mode also runs the baseline and attaches the rescue block.
pub fn evaluate(
    ck: &CheckpointSet,
    scenes: &[LoadedScene],
    cfg: &RunConfig,
    mode: EvalMode,
    tta: Option<&TtaConfig>,
) -> Result<(EvalReport, Vec<crate::tta::TraceRecord>)> {
    if needs_recon(mode, cfg.fusion.alpha) && ck.recon.is_none() {
        return Err(Error::Config(format!(
            "{mode:?} evaluation needs missing artifact {STAGE2_CKPT}"
        )));
    }
    let scenes = match cfg.eval.max_samples {
        Some(n) => &scenes[..n.min(scenes.len())],
        None => scenes,
    };
    let fp = cfg.fingerprint();
    let a = answerer(ck, cfg, mode, tta);
    let mut report = evaluate_with(&a, scenes, mode, &fp, cfg.eval.substring_match)?;
    let mut trace = a.trace.into_inner().expect("trace lock");
    if mode == EvalMode::ReconDescribe {
        let b = answerer(ck, cfg, EvalMode::Baseline, tta);
        let base = evaluate_with(&b, scenes, EvalMode::Baseline, &fp, cfg.eval.substring_match)?;
        report.rescue = Some(rescue_analysis(&base.samples, &report.samples)?);
        trace.extend(b.trace.into_inner().expect("trace lock"));
    }
    trace.sort_by(|x, y| x.sample_id.cmp(&y.sample_id).then(x.step.cmp(&y.step)));
    Ok((report, trace))
}

#[derive(Debug, Default)]
pub struct PipelineOutput {
    pub checkpoints: Vec<PathBuf>,
    pub report: Option<EvalReport>,
    pub stage1_trace: Vec<f64>,
    pub stage2_trace: Vec<f64>,
}

pub fn run_stage1(cfg: &RunConfig, train: &[LoadedScene], out: &mut PipelineOutput) -> Result<()> {
    let fp = cfg.fingerprint();
    let s1 = stage1_finetune(cfg, train)?;
    write_text(&cfg.out_dir.join(VOCAB_FILE), &s1.vocab.to_json()?)?;
    let mut store = s1.clip.params().clone();
    store.extend(s1.vlm.params().clone());
    let path = cfg.out_dir.join(STAGE1_CKPT);
    write_text(&path, &store.to_tagged_json(Some(&fp))?)?;
    write_trace_file(
        &cfg.out_dir.join(STAGE1_TRACE),
        &fp,
        vec![("clip", &s1.clip_trace), ("lm", &s1.lm_trace)],
    )?;
    out.checkpoints.push(path);
    out.stage1_trace = s1.lm_trace;
    Ok(())
}

pub fn run_stage2(cfg: &RunConfig, train: &[LoadedScene], out: &mut PipelineOutput) -> Result<()> {
    let fp = cfg.fingerprint();
    let (model, trace) = stage2_train_sdf(cfg, train)?;
    let path = cfg.out_dir.join(STAGE2_CKPT);
    write_text(&path, &model.params().to_tagged_json(Some(&fp))?)?;
    write_trace_file(&cfg.out_dir.join(STAGE2_TRACE), &fp, vec![("sdf", &trace)])?;
    out.checkpoints.push(path);
    out.stage2_trace = trace;
    Ok(())
}

/// Per-sample adaptation and evaluation with checkpoints read from `ckpt_dir`.
pub fn run_stage3(cfg: &RunConfig, ckpt_dir: &Path, timing: &mut Timing) -> Result<EvalReport> {
    require(ckpt_dir.join(STAGE1_CKPT), "stage 3")?;
    if needs_recon(cfg.eval.mode, cfg.fusion.alpha) {
        require(ckpt_dir.join(STAGE2_CKPT), "stage 3")?;
    }
    let t = Instant::now();
    let ck = CheckpointSet::load(ckpt_dir, cfg)?;
    let (_, test) = load_split(&cfg.test_dir)?;
    let tta = (cfg.tta.steps > 0).then_some(&cfg.tta);
    let (report, trace) = evaluate(&ck, &test, cfg, cfg.eval.mode, tta)?;
    write_trace(&cfg.out_dir.join(TTA_TRACE), &trace)?;
    emit_report(&report, ReportFormat::Json, &cfg.out_dir.join(REPORT_JSON))?;
    emit_report(&report, ReportFormat::Csv, &cfg.out_dir.join(REPORT_CSV))?;
    timing.phases.push(("stage3".into(), t.elapsed().as_secs_f64()));
    Ok(report)
}

/// Runs the selected stages in order; stage 3 reads the checkpoints of
/// stages 1 and 2 from `out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if cfg.stages.contains(&3) && !cfg.stages.contains(&1) {
        require(dir.join(STAGE1_CKPT), "stage 3")?;
    }
    if cfg.stages.contains(&3) && !cfg.stages.contains(&2) && needs_recon(cfg.eval.mode, cfg.fusion.alpha) {
        require(dir.join(STAGE2_CKPT), "stage 3")?;
    }
    write_text(&dir.join(RUN_CONFIG_FILE), &cfg.to_json()?)?;
    let mut timing = Timing {
        fingerprint: cfg.fingerprint(),
        phases: Vec::new(),
    };
    let mut out = PipelineOutput::default();
    if cfg.stages.contains(&1) || cfg.stages.contains(&2) {
        let (_, train) = load_split(&cfg.train_dir)?;
        if cfg.stages.contains(&1) {
            let t = Instant::now();
            run_stage1(cfg, &train, &mut out)?;
            timing.phases.push(("stage1".into(), t.elapsed().as_secs_f64()));
        }
        if cfg.stages.contains(&2) {
            let t = Instant::now();
            run_stage2(cfg, &train, &mut out)?;
            timing.phases.push(("stage2".into(), t.elapsed().as_secs_f64()));
        }
    }
    if cfg.stages.contains(&3) {
        out.report = Some(run_stage3(cfg, dir, &mut timing)?);
    }
    timing.write(&dir.join(TIMING_FILE))?;
    Ok(out)
}
