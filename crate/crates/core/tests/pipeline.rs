use dral_core::data::Dataset;
use dral_core::experiment::{metrics_csv, parse_metrics_csv, run_al, DatasetSource, ExperimentConfig, MetricsLog};
use dral_core::strategies::StrategyName;

fn small(strategy: StrategyName, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(
        r#"{
          "dataset": {"blobs": {"samples_per_class": 100}},
          "seed_labeled_size": 20, "validation_size": 60, "test_size": 60,
          "round_budget": 10, "global_budget": 40,
          "learner": {"epochs_full": 8, "epochs_finetune": 2},
          "agent": {"min_fill_for_sampling": 8, "sample_batch": 4}
        }"#,
    )
    .unwrap();
    cfg.strategy = strategy;
    cfg.seed = seed;
    cfg
}

fn without_wall(log: &MetricsLog) -> MetricsLog {
    let mut log = log.clone();
    log.rows.iter_mut().for_each(|r| r.wall_ms = 0);
    log
}

#[test]
fn every_strategy_is_reproducible_and_within_budget() {
    for strategy in StrategyName::ALL {
        let cfg = small(strategy, 2);
        let (a, b) = (run_al(&cfg).unwrap(), run_al(&cfg).unwrap());
        assert_eq!(without_wall(&a.log), without_wall(&b.log), "{strategy}");
        assert_eq!(a.events, b.events, "{strategy}");

        let fresh: usize = a.events.iter().map(|e| e.fresh_queries).sum();
        assert_eq!(a.pool.oracle_queries_spent(), cfg.seed_labeled_size + fresh, "{strategy}");
        assert!(fresh <= cfg.global_budget, "{strategy}: {fresh} queries");
        let last = a.log.final_row().unwrap();
        assert!(last.cumulative_labels <= cfg.seed_labeled_size + cfg.global_budget);
        assert!((0.0..=1.0).contains(&last.test_acc));
        if strategy != StrategyName::Dral {
            assert_eq!(fresh, cfg.global_budget, "{strategy}");
            assert_eq!(last.cumulative_labels, 60, "{strategy}");
        }
    }
}

#[test]
fn different_seeds_pick_different_samples() {
    let a = run_al(&small(StrategyName::Random, 1)).unwrap();
    let b = run_al(&small(StrategyName::Random, 2)).unwrap();
    assert_ne!(a.log.rows[1].selected, b.log.rows[1].selected);
}

#[test]
fn metrics_csv_round_trips() {
    let runs: Vec<_> =
        [StrategyName::Margin, StrategyName::Entropy].into_iter().map(|s| run_al(&small(s, 6)).unwrap().log).collect();
    let parsed = parse_metrics_csv(&metrics_csv(&runs).unwrap()).unwrap();
    assert_eq!(parsed.len(), 2);
    for (p, r) in parsed.iter().zip(&runs) {
        assert_eq!((p.strategy, p.seed), (r.strategy, r.seed));
        assert_eq!(p.rows.len(), r.rows.len());
        for (pr, rr) in p.rows.iter().zip(&r.rows) {
            assert_eq!((pr.round, pr.cumulative_labels, pr.wall_ms), (rr.round, rr.cumulative_labels, rr.wall_ms));
            assert!((pr.test_acc - rr.test_acc).abs() < 1e-9);
        }
    }
}

#[test]
fn file_dataset_matches_generated_one() {
    let cfg = small(StrategyName::Margin, 4);
    let DatasetSource::Blobs(spec) = &cfg.dataset else { unreachable!() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blobs.json");
    std::fs::write(&path, spec.generate(cfg.seed).unwrap().to_json().unwrap()).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), spec.generate(4).unwrap());

    let mut from_file = cfg.clone();
    from_file.dataset = DatasetSource::File(path);
    let (a, b) = (run_al(&cfg).unwrap(), run_al(&from_file).unwrap());
    assert_eq!(without_wall(&a.log), without_wall(&b.log));
}

#[test]
fn config_json_round_trips_and_rejects_unknown_fields() {
    let cfg = small(StrategyName::Dral, 9);
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    assert!(ExperimentConfig::from_json(r#"{"global_budgett": 10}"#).is_err());
}
