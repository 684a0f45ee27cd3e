//! End-to-end runs through the CLI, persisted artifacts and aggregation.

use std::path::Path;

use metabound::harness::output::parse_loss_tables;
use metabound::harness::runner::report_from_records;
use metabound::harness::{
    cli_main, evaluate_bounds, load_config, read_csv, read_loss_tables, run_experiment, write_loss_tables,
    EvalSettings,
};
use metabound::supersample::LossTable;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.conf")
}

#[test]
fn run_then_plot_from_the_bundled_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = small_config();
    let code = cli_main(["metabound", "run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);

    let configs = load_config(&cfg).unwrap();
    let rows = read_csv(&out.join("results.csv")).unwrap();
    assert!(!rows.is_empty());
    // Every point of the sweep appears, each with its own tables file.
    for c in &configs {
        assert!(rows.iter().any(|r| r.n == c.n && r.m == c.m && r.config_hash == c.config_hash()));
        assert!(out.join(format!("loss_tables_{}.txt", c.config_hash())).exists());
    }
    assert!(rows.iter().all(|r| r.failures == 0 && r.value.is_finite()));

    let svg = dir.path().join("fig.svg");
    let code = cli_main([
        "metabound",
        "plot",
        "--csv",
        out.join("results.csv").to_str().unwrap(),
        "--out",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("empirical gap"));
}

#[test]
fn persisted_tables_reproduce_every_reported_bound() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in load_config(&small_config()).unwrap() {
        let res = run_experiment(&cfg, 2).unwrap();
        let path = dir.path().join(format!("{}.txt", cfg.config_hash()));
        write_loss_tables(res.tables(), &path).unwrap();

        let tables = read_loss_tables(&path).unwrap();
        let original: Vec<&LossTable> = res.tables();
        assert_eq!(tables.iter().collect::<Vec<_>>(), original);

        let refs: Vec<&LossTable> = tables.iter().collect();
        let settings = EvalSettings {
            bounds: cfg.bounds.clone(),
            estimator: cfg.estimator,
            variant: cfg.variant,
        };
        let offline = evaluate_bounds(&refs, &vec![None; refs.len()], &settings, 0, cfg.m - cfg.maml_split()).unwrap();
        assert_eq!(offline.entries, res.report.entries);
        assert_eq!(offline.gap, res.report.gap);
        assert_eq!(offline.empirical_risk, res.report.empirical_risk);
    }
}

#[test]
fn report_is_independent_of_record_order() {
    let cfg = load_config(&small_config()).unwrap().remove(0);
    let res = run_experiment(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let mut records = res.records.clone();
        records.shuffle(&mut rng);
        assert_eq!(report_from_records(&cfg, &records).unwrap(), res.report);
    }
}

#[test]
fn loss_table_text_survives_a_round_trip() {
    let cfg = load_config(&small_config()).unwrap().remove(1);
    let res = run_experiment(&cfg, 1).unwrap();
    let text = metabound::harness::output::render_loss_tables(res.tables());
    let back = parse_loss_tables(&text).unwrap();
    assert_eq!(back.iter().collect::<Vec<_>>(), res.tables());
}

#[test]
fn unknown_config_keys_fail_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "n = 2\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(cli_main(["metabound", "run", "--config", path.to_str().unwrap()]), 1);
}
