#![allow(dead_code)]

use respagent_core::experiment::{ExperimentKind, RunConfig};
use respagent_core::planner::Policy;

/// A run config shrunk to finish in seconds.
pub fn tiny_config(kind: ExperimentKind, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(kind);
    cfg.corpus.class_counts = vec![6, 5, 4, 3, 3, 2, 2, 2];
    cfg.corpus.duration_s = 1.0;
    cfg.diagnoser.classes = 8;
    cfg.diagnoser.hidden = 16;
    cfg.diagnoser.heads = 2;
    cfg.diagnoser.frames = 16;
    cfg.diagnoser.text_len = 12;
    cfg.diagnoser.epochs = 2;
    cfg.diagnoser.tail_k = 4;
    cfg.generator.model.hidden = 16;
    cfg.generator.model.heads = 2;
    cfg.generator.model.epochs = 2;
    cfg.generator.clips_per_class = 1;
    cfg.generator.max_len = 8;
    cfg.cfm.vnet.hidden = 16;
    cfg.cfm.flow.steps = 20;
    cfg.cfm.flow.batch_size = 32;
    cfg.cfm.eval_samples = 50;
    cfg.planner.policies = vec![Policy::NoSynth, Policy::ClassPrior, Policy::A2ca];
    cfg.planner.budgets = vec![0, 40];
    cfg.planner.rounds = 2;
    cfg.planner.tail_k = 4;
    cfg.bench.lengths = vec![128, 256, 512];
    cfg.reseed(seed);
    cfg
}

pub fn read_json(path: &std::path::Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}
