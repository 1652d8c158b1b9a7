mod common;

use common::{read_json, tiny_config};
use respagent_core::experiment::{run_config_file, run_experiment, ExecutorKind, ExperimentKind, GenerativeSynth, InjectionSource, RunConfig};
use respagent_core::Error;

#[test]
fn every_experiment_writes_its_outputs() {
    let expected: &[(ExperimentKind, &[&str])] = &[
        (ExperimentKind::GenData, &["corpus_manifest.json", "class_counts.csv"]),
        (ExperimentKind::TrainDiagnoser, &["trajectory.csv", "test_metrics.json", "per_class.csv", "model_config.json", "model.params"]),
        (ExperimentKind::TrainGenerator, &["nll.csv", "samples.json", "quantizer.json"]),
        (ExperimentKind::TrainCfm, &["loss.csv", "mixture.json"]),
        (ExperimentKind::Plan, &["profile.json", "plans.json", "plans.csv"]),
        (ExperimentKind::Loop, &["trajectories.json", "sweep.csv", "rounds.csv"]),
        (ExperimentKind::BenchAttn, &["cost.csv", "fit.json"]),
        (ExperimentKind::QaText, &["qa.csv", "qa_summary.json"]),
        (ExperimentKind::Eval, &["test_metrics.json", "per_class.csv", "style.json"]),
    ];
    let root = tempfile::tempdir().unwrap();
    for (kind, files) in expected {
        let out = root.path().join(kind.name());
        let manifest = run_experiment(&tiny_config(*kind, 1), &out).unwrap();
        for f in files.iter().chain(&["config.json"]) {
            assert!(out.join(f).is_file(), "{kind}: missing {f}");
            assert!(manifest.outputs.contains_key(*f), "{kind}: {f} not in manifest");
        }
        let on_disk = read_json(&out.join("manifest.json"));
        assert_eq!(on_disk["result_digest"], manifest.result_digest);
    }
}

#[test]
fn no_synth_loop_stays_flat() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(ExperimentKind::Loop, 2);
    cfg.planner.policies = vec![respagent_core::planner::Policy::NoSynth];
    cfg.planner.budgets = vec![200];
    run_experiment(&cfg, dir.path()).unwrap();
    let t = read_json(&dir.path().join("trajectories.json"));
    let rounds = t[0]["rounds"].as_array().unwrap();
    let f1: Vec<f64> = rounds.iter().map(|r| r["macro_f1"].as_f64().unwrap()).collect();
    assert!(f1.iter().all(|&f| f == f1[0]), "{f1:?}");
}

#[test]
fn bench_fit_is_linear() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(ExperimentKind::BenchAttn);
    cfg.reseed(0);
    run_experiment(&cfg, dir.path()).unwrap();
    let fit = read_json(&dir.path().join("fit.json"));
    assert!(fit["r2"].as_f64().unwrap() > 0.99, "{fit}");
}

#[test]
fn config_files_report_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"experiment": "plan", "planner": {"rounds": "five"}}"#).unwrap();
    match run_config_file(&path, None, &dir.path().join("out")) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "planner.rounds"),
        other => panic!("unexpected {other:?}"),
    }
    std::fs::write(&path, r#"{"experiment": "plan", "planner": {"rounds": 0}}"#).unwrap();
    match run_config_file(&path, None, &dir.path().join("out")) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "planner.rounds"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn seed_override_changes_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, serde_json::to_vec(&tiny_config(ExperimentKind::GenData, 3)).unwrap()).unwrap();
    let a = run_config_file(&path, None, &dir.path().join("a")).unwrap();
    let b = run_config_file(&path, Some(3), &dir.path().join("b")).unwrap();
    let c = run_config_file(&path, Some(4), &dir.path().join("c")).unwrap();
    assert_eq!(a.result_digest, b.result_digest);
    assert_ne!(a.result_digest, c.result_digest);
    assert_eq!(c.seed, 4);
}

#[test]
fn generative_frames_follow_the_reference_shape() {
    let cfg = tiny_config(ExperimentKind::Loop, 4);
    let corpus = respagent_core::benchkit::synth_corpus(&cfg.corpus).unwrap();
    let synth = GenerativeSynth::train(&corpus, &cfg.generator, &cfg.cfm).unwrap();
    let reference = respagent_core::benchkit::FeatureExtractor::toy().extract(&corpus.clips[0].wave);
    let a = synth.frames(2, &reference, 9).unwrap();
    assert_eq!(a.shape(), reference.shape());
    assert!(a.all_finite());
    assert_eq!(a, synth.frames(2, &reference, 9).unwrap());
}

#[test]
fn generative_injection_runs_the_real_loop() {
    let mut cfg = tiny_config(ExperimentKind::Loop, 5);
    cfg.planner.executor = ExecutorKind::RealRetrain;
    cfg.planner.injection = InjectionSource::Generative;
    cfg.planner.policies = vec![respagent_core::planner::Policy::ClassPrior];
    cfg.planner.budgets = vec![20];
    cfg.planner.rounds = 1;
    let root = tempfile::tempdir().unwrap();
    let a = run_experiment(&cfg, &root.path().join("a")).unwrap();
    let b = run_experiment(&cfg, &root.path().join("b")).unwrap();
    assert_eq!(a.result_digest, b.result_digest);
    let t = read_json(&root.path().join("a/trajectories.json"));
    let last = t[0]["rounds"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(last["cumulative"].as_u64(), Some(20));
    assert!(last["macro_f1"].as_f64().unwrap().is_finite());
}
