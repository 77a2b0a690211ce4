//! Tabular figure data derived from a completed run directory.
//!
//! A run directory holds `config.cfg` plus one sub-directory per variant (see
//! [`crate::federation::VariantRun::write`]). Every figure is a CSV table; plotting is left to
//! external tools.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::federation::{self, ExperimentConfig, Variant};
use crate::model::Matrix;
use crate::FEATURE_NAMES;

pub const CONFIG_FILE: &str = "config.cfg";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Figure {
    Loss,
    Recall,
    Comprehensiveness,
    Sweep,
    Attributions,
    Correlation,
}

impl Figure {
    pub const ALL: [Figure; 6] = [
        Figure::Loss,
        Figure::Recall,
        Figure::Comprehensiveness,
        Figure::Sweep,
        Figure::Attributions,
        Figure::Correlation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Figure::Loss => "loss",
            Figure::Recall => "recall",
            Figure::Comprehensiveness => "comprehensiveness",
            Figure::Sweep => "sweep",
            Figure::Attributions => "attributions",
            Figure::Correlation => "correlation",
        }
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown figure `{s}`")))
    }
}

/// A header and string rows, written as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io("<table>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!("{} vs {} values", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation of every attribution column with the prediction.
pub fn attribution_correlations(attr: &Matrix, y_hat: &[f64]) -> Result<Vec<f64>> {
    if attr.rows() != y_hat.len() {
        return Err(Error::Dimension(format!("{} attribution rows vs {} predictions", attr.rows(), y_hat.len())));
    }
    (0..attr.cols()).map(|j| pearson(&attr.column(j), y_hat)).collect()
}

/// Distribution summary of one attribution column.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnSummary {
    pub mean: f64,
    pub mean_abs: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub negative_fraction: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_column(values: &[f64]) -> Result<ColumnSummary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty attribution column".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ColumnSummary {
        mean,
        mean_abs: values.iter().map(|v| v.abs()).sum::<f64>() / n,
        std: var.sqrt(),
        min: sorted[0],
        q25: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q75: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        negative_fraction: values.iter().filter(|v| **v < 0.0).count() as f64 / n,
    })
}

/// A completed run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub config: ExperimentConfig,
}

#[derive(Debug, Deserialize)]
struct RoundRow {
    round: usize,
    slice: usize,
    loss: f64,
    normalized_loss: f64,
    recall_train: f64,
    recall_test: f64,
    js: f64,
    comprehensiveness: f64,
    total_variation: f64,
    violation: f64,
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    #[allow(dead_code)]
    bs: usize,
    #[allow(dead_code)]
    label: u8,
    y_hat: f64,
    #[allow(dead_code)]
    p_masked: f64,
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
            ));
        }
        let config = ExperimentConfig::load(&root.join(CONFIG_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            config,
        })
    }

    pub fn variant_dir(&self, v: Variant) -> PathBuf {
        self.root.join(v.dir_name())
    }

    fn rounds(&self, v: Variant) -> Result<Vec<RoundRow>> {
        let path = self.variant_dir(v).join(federation::ROUND_REPORTS);
        open_csv(&path)?
            .deserialize()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|e| Error::Parse {
                    path: path.clone(),
                    line: i + 2,
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    /// Pooled test predictions `y_hat` of one slice.
    pub fn predictions(&self, v: Variant, slice: usize) -> Result<Vec<f64>> {
        let path = self.variant_dir(v).join(format!("predictions_slice{slice}.csv"));
        open_csv(&path)?
            .deserialize::<PredictionRow>()
            .map(|r| Ok(r?.y_hat))
            .collect()
    }

    pub fn attributions(&self, v: Variant, slice: usize) -> Result<Matrix> {
        let path = self.variant_dir(v).join(format!("attributions_slice{slice}.csv"));
        let mut data = Vec::new();
        let mut rows = 0;
        for rec in open_csv(&path)?.records() {
            let rec = rec?;
            for f in rec.iter() {
                data.push(f.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.clone(),
                    line: rows + 2,
                    reason: e.to_string(),
                })?);
            }
            rows += 1;
        }
        Matrix::new(rows, FEATURE_NAMES.len(), data)
    }

    pub fn figure(&self, figure: Figure) -> Result<Table> {
        match figure {
            Figure::Loss => self.round_table(&["variant", "slice", "round", "normalized_loss", "loss"], |r| {
                vec![r.normalized_loss.to_string(), r.loss.to_string()]
            }),
            Figure::Recall => {
                let gamma = self.config.gamma.clone();
                self.round_table(
                    &["variant", "slice", "round", "recall_train", "recall_test", "gamma", "violation"],
                    move |r| {
                        vec![
                            r.recall_train.to_string(),
                            r.recall_test.to_string(),
                            gamma[r.slice].to_string(),
                            r.violation.to_string(),
                        ]
                    },
                )
            }
            Figure::Comprehensiveness => self.round_table(
                &["variant", "slice", "round", "comprehensiveness", "js", "total_variation"],
                |r| {
                    vec![
                        r.comprehensiveness.to_string(),
                        r.js.to_string(),
                        r.total_variation.to_string(),
                    ]
                },
            ),
            Figure::Sweep => self.sweep_table(),
            Figure::Attributions => self.attribution_table(),
            Figure::Correlation => self.correlation_table(),
        }
    }

    fn round_table(&self, header: &[&str], cells: impl Fn(&RoundRow) -> Vec<String>) -> Result<Table> {
        let mut t = Table::new(header);
        for &v in &self.config.variants {
            let mut rows = self.rounds(v)?;
            rows.sort_by_key(|r| (r.slice, r.round));
            for r in rows {
                let mut row = vec![v.name().to_string(), r.slice.to_string(), r.round.to_string()];
                row.extend(cells(&r));
                t.rows.push(row);
            }
        }
        Ok(t)
    }

    fn sweep_table(&self) -> Result<Table> {
        let mut t = Table::new(&["variant", "slice", "masked", "p_percent", "comprehensiveness"]);
        for &v in &self.config.variants {
            let metrics = federation::read_metrics(&self.variant_dir(v).join(federation::METRICS))?;
            for s in &metrics.slices {
                for p in &s.sweep {
                    t.rows.push(vec![
                        v.name().to_string(),
                        s.slice.to_string(),
                        p.masked.to_string(),
                        p.p_percent.to_string(),
                        p.comprehensiveness.to_string(),
                    ]);
                }
            }
        }
        Ok(t)
    }

    fn attribution_table(&self) -> Result<Table> {
        let mut t = Table::new(&[
            "variant",
            "slice",
            "feature",
            "mean",
            "mean_abs",
            "std",
            "min",
            "q25",
            "median",
            "q75",
            "max",
            "negative_fraction",
        ]);
        for &v in &self.config.variants {
            for n in 0..self.config.n {
                let attr = self.attributions(v, n)?;
                for (j, name) in FEATURE_NAMES.iter().enumerate() {
                    let s = summarize_column(&attr.column(j))?;
                    t.rows.push(
                        [v.name().to_string(), n.to_string(), name.to_string()]
                            .into_iter()
                            .chain(
                                [s.mean, s.mean_abs, s.std, s.min, s.q25, s.median, s.q75, s.max, s.negative_fraction]
                                    .iter()
                                    .map(f64::to_string),
                            )
                            .collect(),
                    );
                }
            }
        }
        Ok(t)
    }

    fn correlation_table(&self) -> Result<Table> {
        let mut t = Table::new(&["variant", "slice", "feature", "correlation_with_y_hat"]);
        for &v in &self.config.variants {
            for n in 0..self.config.n {
                let corr = attribution_correlations(&self.attributions(v, n)?, &self.predictions(v, n)?)?;
                for (name, c) in FEATURE_NAMES.iter().zip(corr) {
                    t.rows
                        .push(vec![v.name().to_string(), n.to_string(), name.to_string(), c.to_string()]);
                }
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_values() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(pearson(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let s = summarize_column(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.min, s.max, s.median), (1.0, 4.0, 2.5));
        assert_eq!(s.q25, 1.75);
        assert_eq!(s.negative_fraction, 0.0);
    }

    #[test]
    fn figure_names() {
        for f in Figure::ALL {
            assert_eq!(f.name().parse::<Figure>().unwrap(), f);
        }
        assert!("heatmap".parse::<Figure>().is_err());
    }
}
