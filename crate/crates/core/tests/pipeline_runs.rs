mod common;

use common::*;
use tce_core::datasets::{Origin, TransitionDataset};
use tce_core::generator::TceModels;
use tce_core::netcore::Checkpoint;
use tce_core::pipeline::{run_pipeline, RunDir, Stage};
use tce_core::selection::selection_size;

fn files(dir: &RunDir) -> Vec<(String, Vec<u8>)> {
    ["report.json", "metrics.jsonl", "selection.json", "data/train.tced", "models/policy.ckpt"]
        .iter()
        .map(|n| (n.to_string(), std::fs::read(dir.root().join(n)).unwrap()))
        .collect()
}

#[test]
fn rerunning_any_stage_reproduces_downstream_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config("sm", 0.2, 0.1, 3);
    let dir = RunDir::new(tmp.path().join("run"));
    run_pipeline(&cfg, &dir, Stage::Collect).unwrap();
    let first = files(&dir);
    for stage in Stage::ALL.into_iter().skip(1) {
        run_pipeline(&cfg, &dir, stage).unwrap();
        for ((name, a), (_, b)) in first.iter().zip(files(&dir)) {
            assert!(*a == b, "{name} changed after rerun from {stage}");
        }
    }
}

#[test]
fn different_seeds_give_different_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = RunDir::new(tmp.path().join("a"));
    let b = RunDir::new(tmp.path().join("b"));
    run_pipeline(&tiny_config("og", 0.2, 0.0, 1), &a, Stage::Collect).unwrap();
    run_pipeline(&tiny_config("og", 0.2, 0.0, 2), &b, Stage::Collect).unwrap();
    assert_ne!(std::fs::read(a.data("generated")).unwrap(), std::fs::read(b.data("generated")).unwrap());
}

#[test]
fn generated_data_records_its_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config("og", 0.5, 0.0, 4);
    let dir = RunDir::new(tmp.path().join("run"));
    let report = run_pipeline(&cfg, &dir, Stage::Collect).unwrap();

    let gen = TransitionDataset::read(dir.data("generated")).unwrap();
    let extra = &gen.meta().extra;
    assert_eq!(extra["lambda_cov"], 0.5);
    assert_eq!(extra["lambda_mix"], 0.0);
    assert_eq!(extra["sampler_steps"], 10);
    assert_eq!(gen.meta().config_hash, cfg.hash());
    assert!(gen.rows().iter().all(|t| t.origin == Origin::Generated && !t.done));

    let ck = Checkpoint::load(dir.model("generator")).unwrap();
    let models = TceModels::from_checkpoint(&ck).unwrap();
    assert_eq!(extra["model_checksums"], serde_json::to_value(models.checksums()).unwrap());
    // Only target rows ever train the transition model.
    assert!(models.q_tran.provenance.keys().all(|o| *o == Origin::Target));
    let n_src = models.q_mix.provenance.get(&Origin::Source).copied().unwrap_or(0);
    assert_eq!(n_src, selection_size(0.5, cfg.data.source_size));
    assert_eq!(report.sizes.generated, gen.len());
}

#[test]
fn training_sets_follow_the_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let count = |ds: &TransitionDataset, o: Origin| ds.rows().iter().filter(|t| t.origin == o).count();
    for (variant, lcov, lmix) in [("target-only", 0.0, 0.0), ("simple-aug", 0.0, 0.0), ("og", 0.2, 0.0), ("sm", 0.2, 0.1)] {
        let cfg = tiny_config(variant, lcov, lmix, 5);
        let dir = RunDir::new(tmp.path().join(variant));
        run_pipeline(&cfg, &dir, Stage::Collect).unwrap();
        let train = TransitionDataset::read(dir.data("train")).unwrap();
        assert_eq!(count(&train, Origin::Target), cfg.data.target_size, "{variant}");
        assert_eq!(count(&train, Origin::Source), selection_size(lmix, cfg.data.source_size), "{variant}");
        let generated = count(&train, Origin::Generated);
        if variant == "target-only" {
            assert_eq!(generated, 0);
            assert!(!dir.data("generated").exists());
        } else {
            assert!(generated > 0, "{variant}");
        }
    }
}
