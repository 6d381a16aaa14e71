//! Acceptance run: one PASS/FAIL line per criterion; exits non-zero on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use occvlm::geom;
use occvlm::harness::eval::{evaluate_with, majority_baseline, rescue_analysis, SampleResult, VlmAnswerer};
use occvlm::harness::report::to_csv;
use occvlm::harness::train::{stage1_finetune, Stage1Output};
use occvlm::harness::{run_pipeline, EvalMode, EvalReport, RunConfig};
use occvlm::image::patch_coverage;
use occvlm::lm::{beam_search, greedy_decode, DecodeConfig};
use occvlm::numerics::OptimizerKind;
use occvlm::recon::train::{probe_error, train_sdf};
use occvlm::recon::{project, reconstruct_mesh, ReconConfig, ReconModel, SdfGrid, SdfSample, SdfTrainConfig};
use occvlm::synth::dataset::{generate_dataset, load_split, pixel_diff_ratio, DatasetSpec, LoadedScene};
use occvlm::synth::manifest::{read_manifest, write_manifest, MANIFEST_FILE, META_FILE};
use occvlm::synth::{generate_scene, ObjectClass, SceneSpec, Split, INSTRUCTIONS};
use occvlm::image::ImageTensor;
use occvlm::text::TokenSeq;
use occvlm::tta::{candidate_score, center_scores, compute_rewards, test_time_adapt, RewardBaseline, TtaConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(t: Instant, limit: Duration, what: &str) -> Result<(), String> {
    ensure(t.elapsed() < limit, format!("{what} took {:.1?}, limit {limit:?}", t.elapsed()))
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let mut parts = Vec::new();
    for (name, cases, tol) in [
        ("clip", clip_cases(100, 101), 1e-4),
        ("recon", recon_cases(100, 102), 1e-4),
        ("fusion", fusion_cases(100, 103), 1e-4),
        ("lm", lm_cases(100, 104), 1e-4),
        ("tta", tta_cases(100, 105), 1e-3),
    ] {
        let (w, c) = worst(&cases);
        ensure(w < tol, format!("{name}: relative error {w:.2e} at {c:?}"))?;
        parts.push(format!("{name} {w:.1e}"));
    }
    within(t, Duration::from_secs(120), "gradient checks")?;
    Ok(format!("100 cases each, worst relative error: {}", parts.join(", ")))
}

fn c2_decoding() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let m = FixedLogits((0..3).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect());
        let (ids, score) = exhaustive_best(&m, 3);
        let b = beam_search(&m, 4, 3, false).map_err(|e| e.to_string())?;
        ensure(
            b.tokens.ids() == ids.as_slice() && (b.cum_logprob - score).abs() < 1e-12,
            format!("beam {:?} vs exhaustive {ids:?} for logits {:?}", b.tokens.ids(), m.0),
        )?;
    }
    for salt in 0..1000 {
        let vocab = rng.random_range(3..8);
        let m = HashedLogits {
            vocab,
            prefix: (0..rng.random_range(0..6)).map(|_| rng.random_range(0..vocab as u32)).collect(),
            salt,
        };
        let max_new = rng.random_range(1..7);
        let g = greedy_decode(&m, max_new).map_err(|e| e.to_string())?;
        let b = beam_search(&m, 1, max_new, false).map_err(|e| e.to_string())?;
        ensure(g == b, format!("greedy {:?} vs width-1 beam {:?}", g.tokens, b.tokens))?;
    }
    within(t, Duration::from_secs(30), "decoding oracles")?;
    Ok("B=4 equals exhaustive on 1000 logit tables; B=1 equals greedy on 1000 prefixes".into())
}

fn tiny_run(data: &Path, out: &Path, stages: &[u8]) -> Result<EvalReport, String> {
    let mut cfg = RunConfig {
        train_dir: data.join("train"),
        test_dir: data.join("test"),
        out_dir: out.to_path_buf(),
        stages: stages.iter().copied().collect(),
        batch_size: 4,
        learning_rate: 1e-3,
        optimizer: OptimizerKind::Adam,
        ..RunConfig::default()
    };
    cfg.fusion.alpha = 1.0;
    cfg.clip.steps = 4;
    cfg.clip.batch_size = 4;
    cfg.sdf_train.steps = 3;
    cfg.sdf_train.points_per_scene = 64;
    cfg.tta.steps = 0;
    cfg.eval.grid_resolution = 8;
    let out = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    out.report.ok_or_else(|| "no report".to_string())
}

fn c3_endpoints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.random_range(1..65);
        let a = occvlm::clip::Embedding::new((0..n).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect());
        let b = occvlm::clip::Embedding::new((0..n).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect());
        let bits = |e: &occvlm::clip::Embedding| e.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let one = occvlm::fusion::blend(&a, &b, 1.0).map_err(|e| e.to_string())?;
        let zero = occvlm::fusion::blend(&a, &b, 0.0).map_err(|e| e.to_string())?;
        ensure(bits(&one) == bits(&a) && bits(&zero) == bits(&b), "blend endpoint is not bitwise")?;
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    generate_dataset(
        &data,
        &DatasetSpec {
            seed: 33,
            train_instances: 8,
            test_instances: 4,
            ..DatasetSpec::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let full = tiny_run(&data, &tmp.path().join("full"), &[1, 2, 3])?;
    let clip_only = tiny_run(&data, &tmp.path().join("clip_only"), &[1, 3])?;
    ensure(
        !tmp.path().join("clip_only").join(occvlm::harness::pipeline::STAGE2_CKPT).exists(),
        "clip-only build produced a recon checkpoint",
    )?;
    ensure(full.samples == clip_only.samples, "alpha=1 predictions differ from the clip-only build")?;
    ensure(full.per_instruction == clip_only.per_instruction, "alpha=1 accuracies differ")?;
    Ok(format!(
        "blend bitwise at 0 and 1 on 1000 pairs; alpha=1 run equals recon-disabled run on {} graded samples",
        full.samples.len()
    ))
}

fn c4_centering() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..10_000 {
        let k = rng.random_range(1..65);
        let s: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let r = center_scores(&s, RewardBaseline::Mean).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max(r.iter().sum::<f64>().abs());
        if k == 1 {
            ensure(r[0] == 0.0, "K=1 reward is not 0")?;
        }
    }
    ensure(worst_sum < 1e-9, format!("reward sum {worst_sum:e}"))?;

    let clip = toy_clip(4);
    let vlm = toy_vlm(4);
    let img = random_features(&mut rng);
    let x = clip.encode_image_features(&img).map_err(|e| e.to_string())?;
    let ins = random_tokens(&mut rng, 3);
    let before = clip.params().checksum();
    let cfg = TtaConfig {
        learning_rate: 0.1,
        ..TtaConfig::default()
    };
    let mut moved = 0;
    for i in 0..10 {
        let cands = occvlm::tta::draw_candidates(&vlm, &x, &ins, &cfg, i).map_err(|e| e.to_string())?;
        let r = compute_rewards(&clip, &cands, &img, RewardBaseline::Mean).map_err(|e| e.to_string())?;
        ensure(r.iter().map(|x| x.reward).sum::<f64>().abs() < 1e-9, "candidate rewards do not sum to 0")?;
        let one = compute_rewards(&clip, &cands[..1], &img, RewardBaseline::Mean).map_err(|e| e.to_string())?;
        ensure(one[0].reward == 0.0, "single candidate reward is not 0")?;
        let (_, trace) = test_time_adapt(&vlm, &clip, &x, &img, &ins, &cfg, &format!("s{i}")).map_err(|e| e.to_string())?;
        moved += trace.len();
    }
    ensure(clip.params().checksum() == before, "reward tower changed during adaptation")?;
    within(t, Duration::from_secs(10), "centering properties")?;
    Ok(format!(
        "max |sum of rewards| {worst_sum:.1e} over 10000 batches; reward tower checksum unchanged after {moved} adaptation steps"
    ))
}

fn c5_geometry() -> Outcome {
    let t = Instant::now();
    let r = 64;
    let grid = SdfGrid::from_fn(r, |p| geom::norm(p) - 0.5).map_err(|e| e.to_string())?;
    let mesh = reconstruct_mesh(&grid).map_err(|e| e.to_string())?;
    let cell = grid.cell_size();
    let max_err = mesh
        .vertices()
        .iter()
        .map(|v| (geom::norm(*v) - 0.5).abs())
        .fold(0.0, f64::max);
    ensure(max_err <= 2.0 * cell, format!("vertex off the sphere by {max_err}"))?;
    let chi = mesh.euler_characteristic();
    ensure(chi == 2, format!("Euler characteristic {chi}"))?;
    let proj = project(&mesh);
    let n = occvlm::image::IMAGE_SIZE;
    let covered = (0..n * n).filter(|i| !proj.image.is_background(i / n, i % n)).count() as f64 / (n * n) as f64;
    // The image spans [-1, 1]², so a radius-0.5 disc covers π·0.25 / 4 of it.
    let disc = std::f64::consts::PI * 0.25 / 4.0;
    let rel = (covered - disc).abs() / disc;
    ensure(rel < 0.05, format!("silhouette area off by {:.2}%", rel * 100.0))?;
    within(t, Duration::from_secs(60), "geometry oracle")?;
    Ok(format!(
        "max vertex error {max_err:.1e} (2 cells = {:.3}), chi = {chi}, silhouette area error {:.2}%",
        2.0 * cell,
        rel * 100.0
    ))
}

fn c6_stage2() -> Outcome {
    let t = Instant::now();
    let spec = SceneSpec {
        num_views: 1,
        classes: vec![ObjectClass::Sphere, ObjectClass::Box],
        ..SceneSpec::default()
    };
    let samples: Vec<SdfSample> = (0..50u64)
        .into_par_iter()
        .map(|i| {
            let (rec, r) = generate_scene(1000 + i, "s2", Split::Train, &spec).unwrap().remove(0);
            SdfSample {
                // Quantized like a PNG round trip, matching what training reads from disk.
                features: r.image.quantized().features(),
                coverage: patch_coverage(&r.occluder_mask),
                object: rec.object,
                rotation: occvlm::synth::render::view_rotation(rec.view_id, rec.num_views),
            }
        })
        .collect();
    let mut model = ReconModel::new(ReconConfig::default(), 1);
    let cfg = SdfTrainConfig {
        steps: 2000,
        points_per_scene: 512,
        learning_rate: 3e-3,
        ..SdfTrainConfig::default()
    };
    let trace = train_sdf(&mut model, &samples, &cfg).map_err(|e| e.to_string())?;
    let err = probe_error(&model, &samples).map_err(|e| e.to_string())?;
    ensure(err < 0.05, format!("probe error {err:.4} after {} steps", trace.len()))?;
    within(t, Duration::from_secs(600), "stage-2 training")?;
    Ok(format!("mean |SDF error| {err:.4} on 4096 lattice probe points per scene after {} steps", trace.len()))
}

struct Shared {
    train: Vec<LoadedScene>,
    test: Vec<LoadedScene>,
    stage1: Option<Stage1Output>,
}

fn answerer<'a>(s1: &'a Stage1Output) -> VlmAnswerer<'a> {
    VlmAnswerer {
        vlm: &s1.vlm,
        clip: &s1.clip,
        recon: None,
        vocab: &s1.vocab,
        mode: EvalMode::Baseline,
        alpha: 1.0,
        grid_resolution: 32,
        decode: DecodeConfig::default(),
        tta: None,
        trace: Mutex::new(Vec::new()),
    }
}

fn c7_stage1(shared: &mut Shared) -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        ..RunConfig::default()
    };
    let s1 = stage1_finetune(&cfg, &shared.train).map_err(|e| e.to_string())?;
    let report = evaluate_with(&answerer(&s1), &shared.test, EvalMode::Baseline, "acceptance", false)
        .map_err(|e| e.to_string())?;
    let acc = report.per_instruction[0].accuracy;
    let majority = majority_baseline(&shared.train, &shared.test, 1);
    let elapsed = t.elapsed();
    shared.stage1 = Some(s1);
    ensure(acc - majority >= 0.15, format!("instruction-1 accuracy {acc:.3} vs majority {majority:.3}"))?;
    ensure(elapsed < Duration::from_secs(900), format!("stage 1 took {elapsed:.1?}"))?;
    Ok(format!(
        "instruction-1 accuracy {acc:.3} vs majority-class {majority:.3} (+{:.3}) on {} held-out records",
        acc - majority,
        shared.test.len()
    ))
}

fn mean_answer_score(s1: &Stage1Output, scenes: &[LoadedScene], ins: &TokenSeq, tta: &TtaConfig) -> Result<f64, String> {
    let scores = scenes
        .par_iter()
        .map(|s| {
            let x = s1.clip.encode_image_features(&s.features)?;
            let (h, _) = test_time_adapt(&s1.vlm, &s1.clip, &x, &s.features, ins, tta, &s.record.scene_id)?;
            candidate_score(&s1.clip, &h.tokens, &s.features)
        })
        .collect::<occvlm::Result<Vec<f64>>>()
        .map_err(|e| e.to_string())?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn c8_tta(shared: &Shared) -> Outcome {
    let s1 = shared.stage1.as_ref().ok_or("needs the stage-1 model from criterion 7")?;
    let t = Instant::now();
    let scenes = &shared.test[..50];
    let ins = s1.vocab.tokenize(INSTRUCTIONS[4]);
    let clip_sum = s1.clip.params().checksum();

    // steps = 0 must be the unadapted beam output, bit for bit.
    let still = TtaConfig {
        steps: 0,
        ..TtaConfig::default()
    };
    for s in scenes {
        let x = s1.clip.encode_image_features(&s.features).map_err(|e| e.to_string())?;
        let (h, _) = test_time_adapt(&s1.vlm, &s1.clip, &x, &s.features, &ins, &still, "z").map_err(|e| e.to_string())?;
        let base = beam_search(&s1.vlm.prompt(&x, &ins).map_err(|e| e.to_string())?, still.beam_width, still.max_new, false)
            .map_err(|e| e.to_string())?;
        ensure(
            h.tokens == base.tokens && h.cum_logprob.to_bits() == base.cum_logprob.to_bits(),
            "steps=0 differs from the unadapted output",
        )?;
    }
    let unadapted = mean_answer_score(s1, scenes, &ins, &still)?;

    let mut wins = 0;
    let mut gains = Vec::new();
    for seed in 0..20 {
        let cfg = TtaConfig {
            learning_rate: 0.01,
            seed,
            ..TtaConfig::default()
        };
        let m = mean_answer_score(s1, scenes, &ins, &cfg)?;
        gains.push(m - unadapted);
        if m > unadapted {
            wins += 1;
        }
    }
    ensure(s1.clip.params().checksum() == clip_sum, "reward tower changed")?;
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    ensure(wins >= 14, format!("adapted answers beat the unadapted mean {unadapted:.4} on {wins}/20 seeds"))?;
    within(t, Duration::from_secs(1200), "test-time adaptation")?;
    Ok(format!(
        "{wins}/20 seeds improve mean answer CLIP-S over {unadapted:.4} (mean gain {mean_gain:+.4}); steps=0 bitwise unadapted"
    ))
}

fn c9_rescue() -> Outcome {
    let (total, correct, rescued) = (6258usize, 4366usize, 1128usize);
    let sample = |i: usize, ok: bool| SampleResult {
        scene_id: format!("{i:05}"),
        instruction: 1,
        expected: "cup".into(),
        predicted: if ok { "cup" } else { "ball" }.into(),
        correct: ok,
    };
    let baseline: Vec<SampleResult> = (0..total).map(|i| sample(i, i < correct)).collect();
    let recon: Vec<SampleResult> = (0..total).map(|i| sample(i, i >= correct && i < correct + rescued)).collect();
    let mut block = rescue_analysis(&baseline, &recon).map_err(|e| e.to_string())?;
    ensure(block.baseline_failures == 1892, format!("failures {}", block.baseline_failures))?;
    ensure(block.rescued == rescued, format!("rescued {}", block.rescued))?;
    ensure((block.increment - 1128.0 / 6258.0).abs() < 1e-12, format!("increment {}", block.increment))?;
    block.reference_increment = Some(0.1692);
    let report = EvalReport {
        mode: EvalMode::ReconDescribe,
        fingerprint: "acceptance".into(),
        per_instruction: occvlm::harness::eval::aggregate(&recon),
        rescue: Some(block.clone()),
        samples: recon,
    };
    let csv = to_csv(&report);
    let note = csv.lines().find(|l| l.starts_with("note,")).ok_or("report carries no note")?;
    ensure(note.contains("+0.1692") && note.contains("1128/6258"), format!("note: {note}"))?;
    Ok(format!("failures 1892, increment {} = 1128/6258; {note}", block.increment_display()))
}

fn c10_dataset(root: &Path, shared: &Shared) -> Outcome {
    let t = Instant::now();
    let dir = root.join("train");
    let manifest = read_manifest(&dir).map_err(|e| e.to_string())?;
    let instances: std::collections::BTreeSet<&str> = manifest.records.iter().map(|r| r.instance_id.as_str()).collect();
    ensure(instances.len() == 500, format!("{} instances", instances.len()))?;
    let mean = manifest.records.iter().map(|r| r.occlusion_ratio).sum::<f64>() / manifest.records.len() as f64;
    ensure((0.20..=0.30).contains(&mean), format!("mean occlusion ratio {mean:.4}"))?;
    let worst = manifest
        .records
        .par_iter()
        .map(|r| {
            let img = ImageTensor::load_png(&dir.join(&r.image))?;
            let clean = ImageTensor::load_png(&dir.join(&r.clean_image))?;
            Ok((pixel_diff_ratio(&img, &clean) - r.occlusion_ratio).abs())
        })
        .collect::<occvlm::Result<Vec<f64>>>()
        .map_err(|e| e.to_string())?
        .into_iter()
        .fold(0.0, f64::max);
    ensure(worst <= 0.02, format!("stored ratio differs from pixel diff by {worst:.4}"))?;
    let copy = root.join("manifest_copy");
    write_manifest(&copy, &manifest).map_err(|e| e.to_string())?;
    for f in [MANIFEST_FILE, META_FILE] {
        let a = std::fs::read(dir.join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(copy.join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, format!("{f} does not round-trip byte-identically"))?;
    }
    ensure(shared.train.len() == manifest.records.len(), "loaded split size differs from manifest")?;
    Ok(format!(
        "mean occlusion ratio {mean:.4} over {} records of 500 scenes; max pixel-diff deviation {worst:.4}; manifests byte-identical ({:.1?})",
        manifest.records.len(),
        t.elapsed()
    ))
}

fn run(results: &mut Vec<(usize, Outcome)>, n: usize, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    match &outcome {
        Ok(m) => println!("PASS criterion {n}: {m} [{:.1?}]", t.elapsed()),
        Err(m) => println!("FAIL criterion {n}: {m} [{:.1?}]", t.elapsed()),
    }
    results.push((n, outcome));
}

fn main() {
    occvlm::harness::configure_threads().expect("thread setting");
    let mut results = Vec::new();
    run(&mut results, 1, c1_gradients);
    run(&mut results, 2, c2_decoding);
    run(&mut results, 3, c3_endpoints);
    run(&mut results, 4, c4_centering);
    run(&mut results, 5, c5_geometry);
    run(&mut results, 6, c6_stage2);
    run(&mut results, 9, c9_rescue);

    let tmp = tempfile::tempdir().expect("temp dir");
    let data = tmp.path().join("data");
    let t = Instant::now();
    generate_dataset(&data, &DatasetSpec::default()).expect("dataset generation");
    let (_, train) = load_split(&data.join("train")).expect("train split");
    let (_, test) = load_split(&data.join("test")).expect("test split");
    println!("dataset: {} train / {} test records in {:.1?}", train.len(), test.len(), t.elapsed());
    let mut shared = Shared {
        train,
        test,
        stage1: None,
    };
    run(&mut results, 10, || c10_dataset(&data, &shared));
    run(&mut results, 7, || c7_stage1(&mut shared));
    run(&mut results, 8, || c8_tta(&shared));

    let failed: Vec<usize> = results.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
