use std::path::Path;

use occvlm::harness::eval::{aggregate, grade, majority_baseline, rescue_analysis, EvalReport, InstructionAccuracy, RescueBlock, SampleResult};
use occvlm::harness::pipeline::{self, REPORT_CSV, REPORT_JSON, STAGE1_CKPT, STAGE2_CKPT, TIMING_FILE, TTA_TRACE};
use occvlm::harness::report::{self, parse_csv, to_csv};
use occvlm::harness::{run_pipeline, EvalMode, RunConfig};
use occvlm::synth::dataset::{generate_dataset, load_split, DatasetSpec};
use occvlm::Error;

fn sample(id: &str, instruction: usize, correct: bool) -> SampleResult {
    SampleResult {
        scene_id: id.into(),
        instruction,
        expected: "cup".into(),
        predicted: if correct { "cup".into() } else { "ball".into() },
        correct,
    }
}

fn report_with_rescue() -> EvalReport {
    let samples = vec![
        sample("a", 1, true),
        sample("b", 1, false),
        sample("a", 2, true),
        sample("b", 2, true),
        sample("a", 3, false),
    ];
    EvalReport {
        mode: EvalMode::ReconDescribe,
        fingerprint: "0123456789abcdef".into(),
        per_instruction: aggregate(&samples),
        rescue: Some(RescueBlock {
            total: 6258,
            baseline_correct: 4366,
            baseline_failures: 1892,
            rescued: 1128,
            increment: 1128.0 / 6258.0,
            reference_increment: Some(0.1692),
        }),
        samples,
    }
}

#[test]
fn grading_is_exact_after_normalization() {
    assert!(grade(1, "cup", "  Cup. ", false));
    assert!(!grade(1, "cup", "a red cup", false));
    assert!(grade(1, "cup", "a red cup", true));
    assert!(!grade(1, "cup", "a red cupboard", true));
    assert!(grade(2, "yes", "Yes", false));
    assert!(!grade(3, "no", "yes", true));
}

#[test]
fn accuracies_are_ratios_of_the_sample_log() {
    let r = report_with_rescue();
    assert_eq!(
        r.per_instruction[0],
        InstructionAccuracy {
            instruction: 1,
            total: 2,
            correct: 1,
            accuracy: 0.5
        }
    );
    assert_eq!(r.per_instruction[3].total, 0);
    assert_eq!(r.per_instruction[3].accuracy, 0.0);
}

#[test]
fn json_csv_parse_round_trip() {
    let r = report_with_rescue();
    let back = report::from_json(&report::to_json(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    let tables = parse_csv(&to_csv(&back)).unwrap();
    assert_eq!(tables.per_instruction, r.per_instruction);
    let mut rescue = r.rescue.clone().unwrap();
    rescue.reference_increment = None;
    assert_eq!(tables.rescue.unwrap(), rescue);
}

#[test]
fn emissions_are_byte_identical() {
    let r = report_with_rescue();
    assert_eq!(to_csv(&r), to_csv(&r.clone()));
    assert_eq!(report::to_json(&r).unwrap(), report::to_json(&r.clone()).unwrap());
}

#[test]
fn rescue_increment_renders_signed_four_decimals() {
    let csv = to_csv(&report_with_rescue());
    let mut lines = csv.lines().skip_while(|l| !l.is_empty()).skip(1);
    assert_eq!(lines.next().unwrap(), report::RESCUE_HEADER);
    assert_eq!(lines.next().unwrap(), "6258,4366,1892,1128,+0.1802");
    let note = lines.next().unwrap();
    assert!(note.starts_with("note,") && note.contains("+0.1692"), "{note}");
    let b = RescueBlock {
        total: 10,
        baseline_correct: 10,
        baseline_failures: 0,
        rescued: 0,
        increment: 0.0,
        reference_increment: None,
    };
    assert_eq!(b.increment_display(), "+0.0000");
    assert!(b.note().is_none());
}

#[test]
fn rescue_counts_only_baseline_failures() {
    let base = vec![sample("a", 1, true), sample("b", 1, false), sample("c", 1, false), sample("b", 2, false)];
    let recon = vec![sample("a", 1, false), sample("b", 1, true), sample("c", 1, false), sample("b", 2, true)];
    let b = rescue_analysis(&base, &recon).unwrap();
    assert_eq!((b.total, b.baseline_correct, b.baseline_failures, b.rescued), (3, 1, 2, 1));
    assert!((b.increment - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn rescue_rejects_mismatched_sample_sets() {
    let base = vec![sample("a", 1, true), sample("b", 1, false)];
    let recon = vec![sample("a", 1, true), sample("c", 1, true)];
    match rescue_analysis(&base, &recon) {
        Err(Error::Domain(m)) => assert!(m.contains('b') && m.contains('c'), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn csv_parser_reports_bad_lines() {
    assert!(matches!(parse_csv("nope\n"), Err(Error::Format { line: 1, .. })));
    let bad = format!("{}\n1,2,x,0.5\n", report::CSV_HEADER);
    assert!(matches!(parse_csv(&bad), Err(Error::Format { line: 2, .. })));
}

#[test]
fn config_round_trips_and_fingerprints() {
    let cfg = RunConfig::default();
    let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.fingerprint(), cfg.fingerprint());
    assert_eq!(cfg.fingerprint().len(), 16);
    let other = RunConfig { seed: 1, ..cfg.clone() };
    assert_ne!(other.fingerprint(), cfg.fingerprint());
    let partial = RunConfig::from_json(r#"{"seed": 3, "fusion": {"alpha": 1.0}}"#).unwrap();
    assert_eq!((partial.seed, partial.fusion.alpha, partial.batch_size), (3, 1.0, 16));
    assert!(RunConfig::from_json(r#"{"stages": [4]}"#).is_err());
    assert!(RunConfig::from_json(r#"{"fusion": {"alpha": 2.0}}"#).is_err());
}

fn tiny_config(data: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        train_dir: data.join("train"),
        test_dir: data.join("test"),
        out_dir: out.to_path_buf(),
        batch_size: 4,
        learning_rate: 1e-3,
        optimizer: occvlm::numerics::OptimizerKind::Adam,
        ..RunConfig::default()
    };
    cfg.clip.steps = 4;
    cfg.clip.batch_size = 4;
    cfg.sdf_train.steps = 3;
    cfg.sdf_train.points_per_scene = 64;
    cfg.recon.grid_resolution = 8;
    cfg.eval.grid_resolution = 8;
    cfg.decode.max_new = 4;
    cfg.tta.steps = 0;
    cfg
}

fn tiny_data(dir: &Path) {
    let spec = DatasetSpec {
        seed: 5,
        train_instances: 6,
        test_instances: 3,
        ..DatasetSpec::default()
    };
    generate_dataset(dir, &spec).unwrap();
}

#[test]
fn pipeline_end_to_end_and_stage_ordering() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_data(&data);

    // Stage 3 alone cannot run before stage 1 has produced its checkpoint.
    let early = RunConfig {
        stages: [3].into(),
        ..tiny_config(&data, &tmp.path().join("early"))
    };
    match run_pipeline(&early) {
        Err(Error::Config(m)) => assert!(m.contains(STAGE1_CKPT), "{m}"),
        other => panic!("unexpected {other:?}"),
    }

    let out = tmp.path().join("full");
    let cfg = tiny_config(&data, &out);
    let res = run_pipeline(&cfg).unwrap();
    assert_eq!(res.checkpoints.len(), 2);
    for f in [STAGE1_CKPT, STAGE2_CKPT, REPORT_JSON, REPORT_CSV, TIMING_FILE, TTA_TRACE] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report = res.report.unwrap();
    assert_eq!(report.samples.len(), 3 * 2 * 4);
    assert_eq!(report.per_instruction, aggregate(&report.samples));
    let json = std::fs::read(out.join(REPORT_JSON)).unwrap();
    let csv = std::fs::read(out.join(REPORT_CSV)).unwrap();

    // Same seed and config in the same place: byte-identical reports.
    run_pipeline(&cfg).unwrap();
    assert_eq!(std::fs::read(out.join(REPORT_JSON)).unwrap(), json);
    assert_eq!(std::fs::read(out.join(REPORT_CSV)).unwrap(), csv);

    // Re-evaluation from checkpoints in another mode, with the rescue block.
    let ck = pipeline::CheckpointSet::load(&out, &cfg).unwrap();
    let (_, test) = load_split(&cfg.test_dir).unwrap();
    let (rd, _) = pipeline::evaluate(&ck, &test, &cfg, EvalMode::ReconDescribe, None).unwrap();
    let rescue = rd.rescue.unwrap();
    assert_eq!(rescue.total, 6);
    assert_eq!(rescue.baseline_failures, rescue.total - rescue.baseline_correct);

    // A stage-3 run that needs recon but only has stage 1.
    let s1 = tmp.path().join("s1");
    run_pipeline(&RunConfig {
        stages: [1].into(),
        ..tiny_config(&data, &s1)
    })
    .unwrap();
    match run_pipeline(&RunConfig {
        stages: [3].into(),
        ..tiny_config(&data, &s1)
    }) {
        Err(Error::Config(m)) => assert!(m.contains(STAGE2_CKPT), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn alpha_one_matches_clip_only_build() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_data(&data);
    let mut with_recon = tiny_config(&data, &tmp.path().join("with"));
    with_recon.fusion.alpha = 1.0;
    let a = run_pipeline(&with_recon).unwrap().report.unwrap();
    let mut clip_only = tiny_config(&data, &tmp.path().join("without"));
    clip_only.fusion.alpha = 1.0;
    clip_only.stages = [1, 3].into();
    let b = run_pipeline(&clip_only).unwrap().report.unwrap();
    assert!(!tmp.path().join("without").join(STAGE2_CKPT).exists());
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.per_instruction, b.per_instruction);
    let ck = pipeline::CheckpointSet::load(&tmp.path().join("without"), &clip_only).unwrap();
    let (_, test) = load_split(&clip_only.test_dir).unwrap();
    let (base, _) = pipeline::evaluate(&ck, &test, &clip_only, EvalMode::Baseline, None).unwrap();
    assert_eq!(base.samples, b.samples);
}

#[test]
fn majority_baseline_counts_the_most_common_training_answer() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_data(tmp.path());
    let (_, train) = load_split(&tmp.path().join("train")).unwrap();
    let (_, test) = load_split(&tmp.path().join("test")).unwrap();
    for i in 1..=4 {
        let m = majority_baseline(&train, &test, i);
        assert!((0.0..=1.0).contains(&m));
        let hits = (m * test.len() as f64).round();
        assert!((hits / test.len() as f64 - m).abs() < 1e-12);
    }
}
