use std::fs;
use std::path::Path;

use letter_core::pipeline::{
    compose_config, read_recommendations, run_pipeline, run_pipeline_until, PipelineConfig, Preset, Stage,
};
use letter_core::Error;

fn tiny() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.apply_overrides(&[
        "data.synthetic.items=150",
        "data.synthetic.users=220",
        "data.synthetic.topics=5",
        "data.synthetic.semantic_dim=12",
        "cf.dim=8",
        "cf.epochs=5",
        "tokenizer.arch.levels=2",
        "tokenizer.arch.codebook_size=12",
        "tokenizer.arch.latent_dim=8",
        "tokenizer.arch.hidden=[16]",
        "tokenizer.clusters=3",
        "tokenizer.epochs=4",
        "tokenizer.batch_size=64",
        "tokenizer.recluster_every=2",
        "recommender.arch.layers=1",
        "recommender.arch.width=16",
        "recommender.arch.heads=2",
        "recommender.epochs=2",
        "recommender.val_users=20",
        "recommender.val_every=1",
        "recommender.beam_width=10",
        "eval.ks=[5, 10]",
    ])
    .unwrap();
    c
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn overrides_presets_and_unknown_keys() {
    let mut c = PipelineConfig::default();
    c.apply_overrides(&["tokenizer.alpha=0.5", "recommender.example_mode=last-target", "seed=9"])
        .unwrap();
    assert_eq!(c.tokenizer.alpha, 0.5);
    assert_eq!(c.seed, 9);
    assert!(matches!(c.apply_overrides(&["tokenizer.alpah=1"]), Err(Error::Parameter(_))));
    assert!(matches!(c.apply_overrides(&["tokenizer.alpha"]), Err(Error::Parameter(_))));
    assert!(matches!(c.apply_overrides(&["seed=\"x\""]), Err(Error::Parameter(_))));

    for p in Preset::ALL {
        let mut c = PipelineConfig::default();
        c.apply_preset(p);
        let (a, b, t) = p.settings();
        assert_eq!((c.tokenizer.alpha, c.tokenizer.beta, c.recommender.tau), (a, b, t));
        assert_eq!(p.index().to_string().parse::<Preset>().unwrap(), p);
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
    assert_eq!(Preset::SemanticOnly.settings(), (0.0, 0.0, 1.0));
    assert_eq!(Preset::FullRanking.settings(), (0.02, 1e-4, 0.8));
    assert!("7".parse::<Preset>().is_err());

    // a preset applies before the overrides
    let c = compose_config(None, Some(Preset::Full), &["tokenizer.beta=0".into()], Some(3)).unwrap();
    assert_eq!((c.tokenizer.alpha, c.tokenizer.beta, c.seed), (0.02, 0.0, 3));
}

#[test]
fn toml_round_trip_and_seed_derivation() {
    let c = tiny().resolved().unwrap();
    let back = PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.resolved().unwrap(), c);
    let other = PipelineConfig { seed: 1, ..tiny() }.resolved().unwrap();
    assert_ne!(other.tokenizer.seed, c.tokenizer.seed);
    assert_ne!(c.tokenizer.seed, c.recommender.seed);
    // preset changes leave every stage seed alone
    let mut p = tiny();
    p.apply_preset(Preset::FullRanking);
    let p = p.resolved().unwrap();
    assert_eq!(
        (p.data.synthetic.seed, p.tokenizer.seed, p.recommender.seed),
        (c.data.synthetic.seed, c.tokenizer.seed, c.recommender.seed)
    );
    assert!(PipelineConfig::from_toml("[tokenizer]\nbogus = 1\n").is_err());
    assert!(PipelineConfig { seed: u64::MAX, ..tiny() }.resolved().is_err());
}

#[test]
fn end_to_end_writes_every_artifact_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut c = tiny();
    c.apply_preset(Preset::FullRanking);
    let sa = run_pipeline(&c, &a).unwrap();
    let sb = run_pipeline(&c, &b).unwrap();
    assert_eq!(sa, sb);
    let expected = [
        "resolved_config.toml",
        "manifest.json",
        "summary.json",
        "data/interactions.tsv",
        "data/semantic.tsv",
        "data/split.csv",
        "data/topics.csv",
        "cf/cf_embeddings.tsv",
        "cf/user_factors.tsv",
        "cf/training_log.csv",
        "tokenizer/tokenizer.json",
        "tokenizer/training_log.csv",
        "identifiers.csv",
        "recommender/recommender.json",
        "recommender/training_log.csv",
        "recommendations.csv",
        "metrics.csv",
        "diagnostics/code_counts_l1.csv",
        "diagnostics/code_counts_l2.csv",
        "diagnostics/code_groups_l1.csv",
        "diagnostics/code_pca_l1.csv",
        "diagnostics/cf_pairs.csv",
        "diagnostics/quantized_ranking.csv",
        "diagnostics/cf_ranking.csv",
        "diagnostics/generation_by_code.csv",
    ];
    for f in expected {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs between identical runs");
    }
    let metrics = String::from_utf8(read(&a, "metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,k,value\n"));
    assert_eq!(metrics.lines().count(), 5);
    let manifest: serde_json::Value = serde_json::from_slice(&read(&a, "manifest.json")).unwrap();
    assert_eq!(manifest["format"], "letter-run");
    assert!(manifest["files"].as_array().unwrap().len() >= 10);

    // the resolved config reproduces the run on its own
    let resolved = PipelineConfig::load(&a.join("resolved_config.toml")).unwrap();
    let c2 = dir.path().join("c");
    run_pipeline(&resolved, &c2).unwrap();
    assert_eq!(read(&a, "metrics.csv"), read(&c2, "metrics.csv"));

    // recommendations read back to the same evaluation
    let ds = letter_core::pipeline::load_data(&resolved).unwrap().dataset;
    let lists = read_recommendations(&a.join("recommendations.csv"), &ds).unwrap();
    let m = letter_core::pipeline::evaluate_lists(&ds, &lists, &[5, 10]).unwrap();
    assert_eq!(Some(&m), sa.test.as_ref());
    assert!(lists.iter().all(|l| l.len() == 10));
}

#[test]
fn partial_runs_stop_after_the_requested_stage() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_pipeline_until(&tiny(), dir.path(), Stage::Identifiers).unwrap();
    assert!(dir.path().join("identifiers.csv").exists());
    assert!(!dir.path().join("recommender").exists());
    assert!(s.test.is_none());
    assert_eq!(s.levels.len(), 2);
    assert!(s.cf_pair_overlap.is_some());
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.data.interactions = Some(dir.path().join("missing.tsv"));
    c.data.semantic = Some(dir.path().join("missing_sem.tsv"));
    let err = run_pipeline(&c, &dir.path().join("out")).unwrap_err();
    assert!(err.to_string().contains("stage `data`"), "{err}");
    assert_eq!(err.exit_code(), 2);

    // CF width differing from the latent width fails inside the tokenizer stage
    let mut c = tiny();
    c.apply_preset(Preset::Collaborative);
    c.cf.dim = 5;
    let err = run_pipeline(&c, &dir.path().join("out2")).unwrap_err();
    assert!(err.to_string().contains("stage `tokenizer`"), "{err}");

    let mut c = tiny();
    c.data.interactions = Some(dir.path().join("x.tsv"));
    assert!(matches!(c.resolved(), Err(Error::Parameter(_))));
}

#[test]
fn file_inputs_match_the_synthetic_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    run_pipeline_until(&tiny(), &first, Stage::Identifiers).unwrap();
    let mut c = tiny();
    c.data.interactions = Some(first.join("data/interactions.tsv"));
    c.data.semantic = Some(first.join("data/semantic.tsv"));
    let second = dir.path().join("second");
    run_pipeline_until(&c, &second, Stage::Identifiers).unwrap();
    assert_eq!(read(&first, "identifiers.csv"), read(&second, "identifiers.csv"));
    assert_eq!(read(&first, "data/split.csv"), read(&second, "data/split.csv"));
}
