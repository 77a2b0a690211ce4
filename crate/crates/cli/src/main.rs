//! `egfl`: dataset generation, federated training, figure tables and bound evaluation.
//!
//! Exit codes: 0 success, 1 numerical failure inside the pipeline, 2 usage or IO error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use egfl_core::datagen::{self, DatasetGrid};
use egfl_core::federation::{self, ExperimentConfig};
use egfl_core::report::{self, Figure, RunDir};
use egfl_core::theory;
use egfl_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "egfl", version, about = "Explanation-guided fair federated learning for RAN slices")]
struct Cli {
    /// Cap on concurrently trained clients (defaults to the number of cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic per-(BS, slice) datasets.
    GenData {
        #[arg(long, env = "EGFL_SEED", default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
        k: u64,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 1500, value_parser = clap::value_parser!(u64).range(1..))]
        d: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configured variant on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the table behind one figure.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// loss | recall | comprehensiveness | sweep | attributions | correlation
        #[arg(long)]
        figure: String,
        /// Output directory; defaults to `<run>/figures`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the convergence-probability bound with measured inputs.
    Bound {
        #[arg(long)]
        run: PathBuf,
        /// Comma list (`0,0.1,1`) or `start:stop:count`.
        #[arg(long)]
        epsilon_grid: String,
        /// Output CSV; defaults to `<run>/bound_report.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    arguments: BTreeMap<&'a str, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<String>,
    seed: Option<u64>,
    /// Relative path to SHA-256, sorted.
    artifacts: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes every regular file under `dir` except manifests.
fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != MANIFEST) {
                let rel = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

fn write_manifest(path: &Path, manifest: &Manifest<'_>) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("cannot parse epsilon grid `{spec}`"));
    let grid: Vec<f64> = if let [a, b, n] = spec.split(':').collect::<Vec<_>>()[..] {
        let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        match n {
            0 => return Err(bad()),
            1 => vec![a],
            _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
        }
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::InvalidArgument(format!("epsilon grid `{spec}` must hold finite values >= 0")));
    }
    Ok(grid)
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found")))
    }
}

fn gen_data(seed: u64, k: usize, n: usize, d: usize, out: &Path) -> Result<()> {
    let grid = datagen::generate(seed, k, n, d)?;
    grid.export(out)?;
    for s in 0..n {
        log::info!(
            "slice {s} ({}): positive rate {:.3}",
            grid.profiles[s].kind.name(),
            grid.slice_positive_rate(s)
        );
    }
    let arguments = BTreeMap::from([
        ("seed", seed.to_string()),
        ("k", k.to_string()),
        ("n", n.to_string()),
        ("d", d.to_string()),
    ]);
    write_manifest(
        &out.join(MANIFEST),
        &Manifest {
            command: "gen-data",
            arguments,
            config: None,
            seed: Some(seed),
            artifacts: hash_tree(out)?,
        },
    )
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    require_dir(data)?;
    let grid = DatasetGrid::import(data)?;
    cfg.check_grid(&grid)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let runs = federation::run_experiment(&grid, &cfg)?;
    let cfg_path = out.join(report::CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    for run in &runs {
        run.write(&out.join(run.variant.dir_name()))?;
    }
    let arguments = BTreeMap::from([
        ("config", config.display().to_string()),
        ("data", data.display().to_string()),
        ("data_seed", grid.seed.to_string()),
    ]);
    write_manifest(
        &out.join(MANIFEST),
        &Manifest {
            command: "train",
            arguments,
            config: Some(cfg.to_text()),
            seed: Some(cfg.seed),
            artifacts: hash_tree(out)?,
        },
    )
}

fn report_cmd(run: &Path, figure: &str, out: Option<PathBuf>) -> Result<()> {
    let figure: Figure = figure.parse()?;
    let run_dir = RunDir::open(run)?;
    let table = run_dir.figure(figure)?;
    let out = out.unwrap_or_else(|| run.join("figures"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join(format!("{}.csv", figure.name()));
    fs::write(&path, table.to_csv_string()?).map_err(|e| Error::io(&path, e))?;
    write_manifest(
        &out.join(MANIFEST),
        &Manifest {
            command: "report",
            arguments: BTreeMap::from([("run", run.display().to_string()), ("figure", figure.name().to_string())]),
            config: Some(run_dir.config.to_text()),
            seed: Some(run_dir.config.seed),
            artifacts: hash_tree(&out)?,
        },
    )
}

fn bound_cmd(run: &Path, grid_spec: &str, out: Option<PathBuf>) -> Result<()> {
    let grid = parse_grid(grid_spec)?;
    let run_dir = RunDir::open(run)?;
    let cfg = &run_dir.config;
    let delta = federation::oracle_error(cfg)?;
    let mut rows = Vec::new();
    for &v in &cfg.variants {
        let dir = run_dir.variant_dir(v);
        let logs = federation::read_train_logs(&dir.join(federation::TRAIN_LOGS))?;
        let metrics = federation::read_metrics(&dir.join(federation::METRICS))?;
        for s in &metrics.slices {
            let est = theory::empirical_estimates(&logs, s.slice, metrics.radius, s.metrics.total_variation, delta)?;
            if est.nu_clamped {
                log::warn!(
                    "{} slice {}: {} of {} rounds violate; nu moved to {}",
                    v.name(),
                    s.slice,
                    est.violating_rounds,
                    est.rounds,
                    est.nu
                );
            }
            rows.extend(theory::bound_rows(v.name(), &est, &grid)?);
        }
    }
    let path = out.unwrap_or_else(|| run.join("bound_report.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    drop(w);
    let manifest_path = path.with_extension("manifest.json");
    let mut artifacts = BTreeMap::new();
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    artifacts.insert(name, sha256_file(&path)?);
    write_manifest(
        &manifest_path,
        &Manifest {
            command: "bound",
            arguments: BTreeMap::from([
                ("run", run.display().to_string()),
                ("epsilon_grid", grid_spec.to_string()),
                ("oracle_error", delta.to_string()),
            ]),
            config: Some(cfg.to_text()),
            seed: Some(cfg.seed),
            artifacts,
        },
    )
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(usize::from(t))
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    match cli.command {
        Command::GenData { seed, k, n, d, out } => gen_data(seed, k as usize, n as usize, d as usize, &out),
        Command::Train { config, data, out } => train(&config, &data, &out),
        Command::Report { run, figure, out } => report_cmd(&run, &figure, out),
        Command::Bound { run, epsilon_grid, out } => bound_cmd(&run, &epsilon_grid, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                msg.push_str(&format!("\n  caused by: {s}"));
                source = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(if e.is_numeric() { 1 } else { 2 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("0").unwrap(), vec![0.0]);
        assert_eq!(parse_grid("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("0:1:5").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(parse_grid("a:b").is_err());
        assert!(parse_grid("-1").is_err());
        assert!(parse_grid("0:1:0").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
