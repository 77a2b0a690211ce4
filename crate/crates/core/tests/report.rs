use std::fs;

use egfl_core::datagen;
use egfl_core::explain;
use egfl_core::federation::{self, ExperimentConfig, Variant};
use egfl_core::model::DEFAULT_LAYER_DIMS;
use egfl_core::report::{self, Figure, RunDir, CONFIG_FILE};
use egfl_core::Model;

fn write_run(dir: &std::path::Path) -> ExperimentConfig {
    let cfg = ExperimentConfig {
        n: 3,
        k: 2,
        d: 100,
        t: 3,
        l: 2,
        ig_steps: 8,
        variants: vec![Variant::EgflJs, Variant::FlVanilla],
        ..ExperimentConfig::default()
    };
    let grid = datagen::generate(cfg.seed, cfg.k, cfg.n, cfg.d).unwrap();
    fs::write(dir.join(CONFIG_FILE), cfg.to_text()).unwrap();
    for run in federation::run_experiment(&grid, &cfg).unwrap() {
        run.write(&dir.join(run.variant.dir_name())).unwrap();
    }
    cfg
}

#[test]
fn figures_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run(dir.path());
    let run = RunDir::open(dir.path()).unwrap();

    let loss = run.figure(Figure::Loss).unwrap();
    assert_eq!(loss.rows.len(), cfg.variants.len() * cfg.n * cfg.t);
    let col = loss.column("normalized_loss").unwrap();
    assert!(loss.rows.iter().all(|r| r[col].parse::<f64>().unwrap().is_finite()));

    let recall = run.figure(Figure::Recall).unwrap();
    let g = recall.column("gamma").unwrap();
    assert_eq!(recall.rows[0][g], "0.82");

    let sweep = run.figure(Figure::Sweep).unwrap();
    let p = sweep.column("p_percent").unwrap();
    let mut percents: Vec<String> = sweep.rows.iter().map(|r| r[p].clone()).collect();
    percents.sort();
    percents.dedup();
    assert_eq!(percents, vec!["33.3", "66.7"]);

    let corr = run.figure(Figure::Correlation).unwrap();
    assert_eq!(corr.rows.len(), cfg.variants.len() * cfg.n * 3);
    let attr = run.figure(Figure::Attributions).unwrap();
    assert!(!attr.rows.is_empty());
    assert!(attr.to_csv_string().unwrap().starts_with(&attr.header.join(",")));
}

#[test]
fn missing_run_is_io_error() {
    let err = RunDir::open(std::path::Path::new("/nonexistent/egfl-run")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/egfl-run"));
}

#[test]
fn ignored_feature_has_no_correlation() {
    let mut m = Model::seeded(&DEFAULT_LAYER_DIMS, 1.0, 8).unwrap();
    let first = &mut m.layers_mut()[0];
    for o in 0..first.outputs {
        first.weights[o * first.inputs + 1] = 0.0;
    }
    let grid = datagen::generate(3, 1, 1, 200).unwrap();
    let data = grid.standardized(0, 0);
    let attr = explain::attribution_matrix(&m, &data.features, &[0.0; 3], 50).unwrap();
    let y_hat = m.predict(&data.features).unwrap();
    let corr = report::attribution_correlations(&attr.values, &y_hat).unwrap();
    assert!(corr[1].abs() < 0.1, "latency correlation {}", corr[1]);
}
