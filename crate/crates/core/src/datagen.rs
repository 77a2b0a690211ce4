//! Synthetic non-IID traffic-drop datasets, one per (base station, slice).
//!
//! Per client `(k, n)` a base-station intensity `lambda_kn` is drawn from the slice's range.
//! Sample `i` of `D` then draws
//!
//! ```text
//! demand   ~ Poisson(lambda_kn * (1 + 0.5 sin(2 pi i / D)))
//! prb      ~ U(slice PRB range)
//! snr_db   ~ U(slice SNR range)
//! capacity = prb * log2(1 + 10^(snr_db / 10)) * kappa_n
//! latency  = base_n + coef_n * demand / capacity + N(0, (0.05 base_n)^2)
//! drop     = demand > tau_n * capacity
//! ```
//!
//! `kappa_n` puts the median utilisation of the slice at one; `tau_n` is found by bisection so
//! that the slice-wide drop rate hits the profile's target. PRB and channel quality therefore
//! drive drops directly, while latency carries a weaker, noisy view of the load.
//!
//! Features are z-scored with per-slice statistics pooled over all base stations.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LocalDataset, Matrix};
use crate::FEATURE_NAMES;

pub const MAX_ATTEMPTS: usize = 100;
/// Latency noise standard deviation as a fraction of the base latency.
pub const LATENCY_NOISE: f64 = 0.05;
/// Minimum count of each class per client, so that stratified splits keep both classes.
pub const MIN_CLASS_COUNT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SliceKind {
    #[serde(rename = "eMBB")]
    Embb,
    #[serde(rename = "uRLLC")]
    Urllc,
    #[serde(rename = "mMTC")]
    Mmtc,
}

impl SliceKind {
    pub const ALL: [SliceKind; 3] = [SliceKind::Embb, SliceKind::Urllc, SliceKind::Mmtc];

    pub fn name(self) -> &'static str {
        match self {
            SliceKind::Embb => "eMBB",
            SliceKind::Urllc => "uRLLC",
            SliceKind::Mmtc => "mMTC",
        }
    }

    /// Slice `n` cycles through eMBB, uRLLC, mMTC.
    pub fn for_index(n: usize) -> Self {
        Self::ALL[n % 3]
    }
}

/// Traffic and radio profile of one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceProfile {
    pub kind: SliceKind,
    /// Range of the per-base-station Poisson intensity, arrivals per second.
    pub intensity: (f64, f64),
    pub prb: (f64, f64),
    pub snr_db: (f64, f64),
    pub latency_base_ms: f64,
    /// Added latency per unit of utilisation (demand / capacity).
    pub latency_load_ms: f64,
    pub target_positive_rate: f64,
}

impl SliceProfile {
    /// Every load coefficient is a quarter of the slice's latency noise deviation per unit of
    /// utilisation, so latency tracks load but stays a weaker signal than PRB and SNR.
    pub fn default_for(kind: SliceKind) -> Self {
        match kind {
            SliceKind::Embb => Self {
                kind,
                intensity: (30.0, 90.0),
                prb: (20.0, 100.0),
                snr_db: (5.0, 25.0),
                latency_base_ms: 20.0,
                latency_load_ms: 0.25,
                target_positive_rate: 0.20,
            },
            SliceKind::Urllc => Self {
                kind,
                intensity: (5.0, 20.0),
                prb: (5.0, 40.0),
                snr_db: (10.0, 30.0),
                latency_base_ms: 2.0,
                latency_load_ms: 0.025,
                target_positive_rate: 0.15,
            },
            SliceKind::Mmtc => Self {
                kind,
                intensity: (50.0, 150.0),
                prb: (5.0, 30.0),
                snr_db: (0.0, 15.0),
                latency_base_ms: 50.0,
                latency_load_ms: 0.625,
                target_positive_rate: 0.25,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [("intensity", self.intensity), ("prb", self.prb), ("snr_db", self.snr_db)];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!("{name} range ({lo}, {hi}) is degenerate")));
            }
        }
        if self.intensity.0 <= 0.0 || self.prb.0 <= 0.0 {
            return Err(Error::InvalidArgument("intensity and PRB must be positive".into()));
        }
        if !(0.05..=0.35).contains(&self.target_positive_rate) {
            return Err(Error::InvalidArgument(format!(
                "target positive rate {} outside [0.05, 0.35]",
                self.target_positive_rate
            )));
        }
        Ok(())
    }
}

/// Per-slice z-score parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Population mean and standard deviation per column; zero deviations become one.
    pub fn fit(rows: &[&[f64]], cols: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; cols];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, raw: &Matrix) -> Matrix {
        let mut out = raw.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(j, v)| v * self.std[j] + self.mean[j])
            .collect()
    }
}

/// Slice-level calibration constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kappa: f64,
    pub tau: f64,
    pub positive_rate: f64,
}

/// Everything recorded next to the exported CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub profiles: Vec<SliceProfile>,
    pub calibration: Vec<Calibration>,
    pub standardization: Vec<Standardization>,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "dataset.json";

/// K x N grid of client datasets in physical units plus per-slice metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetGrid {
    pub seed: u64,
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub profiles: Vec<SliceProfile>,
    pub calibration: Vec<Calibration>,
    pub standardization: Vec<Standardization>,
    /// `raw[k][n]`, columns in [`FEATURE_NAMES`] order.
    pub raw: Vec<Vec<LocalDataset>>,
}

impl DatasetGrid {
    pub fn raw(&self, k: usize, n: usize) -> &LocalDataset {
        &self.raw[k][n]
    }

    /// Client dataset in standardized units.
    pub fn standardized(&self, k: usize, n: usize) -> LocalDataset {
        let raw = &self.raw[k][n];
        LocalDataset {
            features: self.standardization[n].apply(&raw.features),
            labels: raw.labels.clone(),
        }
    }

    pub fn slice_positive_rate(&self, n: usize) -> f64 {
        let (pos, total) = (0..self.k).fold((0, 0), |(p, t), k| {
            let d = &self.raw[k][n];
            (p + d.positives(), t + d.len())
        });
        pos as f64 / total as f64
    }

    pub fn client_file_name(k: usize, n: usize) -> String {
        format!("bs{k:03}_slice{n}.csv")
    }

    pub fn manifest(&self) -> DataManifest {
        DataManifest {
            seed: self.seed,
            k: self.k,
            n: self.n,
            d: self.d,
            profiles: self.profiles.clone(),
            calibration: self.calibration.clone(),
            standardization: self.standardization.clone(),
            files: (0..self.k)
                .flat_map(|k| (0..self.n).map(move |n| Self::client_file_name(k, n)))
                .collect(),
        }
    }

    /// Writes one CSV per client and the dataset manifest into `dir`; returns written paths.
    pub fn export(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for k in 0..self.k {
            for n in 0..self.n {
                let path = dir.join(Self::client_file_name(k, n));
                write_client_csv(&path, &self.raw[k][n])?;
                written.push(path);
            }
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }

    pub fn import(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DataManifest = serde_json::from_str(&text)?;
        let mut raw = Vec::with_capacity(manifest.k);
        for k in 0..manifest.k {
            let mut row = Vec::with_capacity(manifest.n);
            for n in 0..manifest.n {
                row.push(read_client_csv(&dir.join(Self::client_file_name(k, n)))?);
            }
            raw.push(row);
        }
        let standardization = (0..manifest.n)
            .map(|n| {
                let rows: Vec<&[f64]> = raw.iter().flat_map(|r| r[n].features.iter_rows()).collect();
                Standardization::fit(&rows, FEATURE_NAMES.len())
            })
            .collect();
        Ok(Self {
            seed: manifest.seed,
            k: manifest.k,
            n: manifest.n,
            d: manifest.d,
            profiles: manifest.profiles,
            calibration: manifest.calibration,
            standardization,
            raw,
        })
    }
}

/// CSV with header `prb,latency_ms,channel_quality_db,drop`.
pub fn write_client_csv(path: &Path, data: &LocalDataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(FEATURE_NAMES.iter().copied().chain(["drop"]))?;
    for (row, y) in data.features.iter_rows().zip(&data.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_client_csv(path: &Path) -> Result<LocalDataset> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let expected: Vec<&str> = FEATURE_NAMES.iter().copied().chain(["drop"]).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(1, format!("expected header {}", expected.join(","))));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != expected.len() {
            return Err(parse_err(line, format!("expected {} fields, got {}", expected.len(), rec.len())));
        }
        for field in rec.iter().take(FEATURE_NAMES.len()) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{field}`")));
            }
            data.push(v);
        }
        let y = match rec[FEATURE_NAMES.len()].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(line, format!("drop label `{other}` is not 0/1"))),
        };
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(parse_err(1, "no samples".into()));
    }
    let rows = labels.len();
    LocalDataset::new(Matrix::new(rows, FEATURE_NAMES.len(), data)?, labels)
}

/// A drop happens when demand exceeds the scaled capacity.
pub fn drop_label(demand: f64, capacity: f64, tau: f64) -> u8 {
    u8::from(demand > tau * capacity)
}

/// Spectral efficiency `log2(1 + 10^(snr_db/10))`.
pub fn spectral_efficiency(snr_db: f64) -> f64 {
    (1.0 + 10f64.powf(snr_db / 10.0)).log2()
}

/// Deterministic seed derived from a base seed and a path of indices (splitmix64 mixing).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |h, &p| mix(h ^ mix(p)))
}

struct Draw {
    demand: Vec<f64>,
    prb: Vec<f64>,
    snr: Vec<f64>,
    noise: Vec<f64>,
}

impl Draw {
    fn sample(profile: &SliceProfile, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let base_rate = rng.gen_range(profile.intensity.0..=profile.intensity.1);
        let mut out = Draw {
            demand: Vec::with_capacity(d),
            prb: Vec::with_capacity(d),
            snr: Vec::with_capacity(d),
            noise: Vec::with_capacity(d),
        };
        for i in 0..d {
            let rate = base_rate * (1.0 + 0.5 * (2.0 * PI * i as f64 / d as f64).sin());
            let poisson = Poisson::new(rate).map_err(|e| Error::Generation(e.to_string()))?;
            out.demand.push(poisson.sample(rng));
            out.prb.push(rng.gen_range(profile.prb.0..=profile.prb.1));
            out.snr.push(rng.gen_range(profile.snr_db.0..=profile.snr_db.1));
            out.noise.push(rng.sample(StandardNormal));
        }
        Ok(out)
    }

    fn raw_utilisation(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.demand.len()).map(|i| self.demand[i] / (self.prb[i] * spectral_efficiency(self.snr[i])))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Smallest threshold whose exceedance rate is at most `target`, by bisection.
fn calibrate_tau(util: &[f64], target: f64) -> f64 {
    let rate = |tau: f64| util.iter().filter(|&&u| u > tau).count() as f64 / util.len() as f64;
    let (mut lo, mut hi) = (0.0, util.iter().copied().fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Default-profile grid.
pub fn generate(seed: u64, k: usize, n: usize, d: usize) -> Result<DatasetGrid> {
    let profiles = (0..n)
        .map(|i| SliceProfile::default_for(SliceKind::for_index(i)))
        .collect::<Vec<_>>();
    generate_with_profiles(seed, k, d, profiles)
}

pub fn generate_with_profiles(
    seed: u64,
    k: usize,
    d: usize,
    profiles: Vec<SliceProfile>,
) -> Result<DatasetGrid> {
    let n = profiles.len();
    if k == 0 || n == 0 || d == 0 {
        return Err(Error::InvalidArgument("K, N and D must be >= 1".into()));
    }
    for p in &profiles {
        p.validate()?;
    }
    let mut raw: Vec<Vec<LocalDataset>> = (0..k).map(|_| Vec::with_capacity(n)).collect();
    let mut calibration = Vec::with_capacity(n);
    let mut standardization = Vec::with_capacity(n);

    for (s, profile) in profiles.iter().enumerate() {
        let mut attempts = vec![0u64; k];
        let mut draws = (0..k)
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b as u64, s as u64, 0]));
                Draw::sample(profile, d, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (kappa, tau, labels) = loop {
            let kappa = median(draws.iter().flat_map(Draw::raw_utilisation).collect()).max(1e-12);
            let util: Vec<f64> = draws
                .iter()
                .flat_map(Draw::raw_utilisation)
                .map(|u| u / kappa)
                .collect();
            let tau = calibrate_tau(&util, profile.target_positive_rate);
            let labels: Vec<Vec<u8>> = draws
                .iter()
                .map(|dr| {
                    (0..d)
                        .map(|i| {
                            let cap = dr.prb[i] * spectral_efficiency(dr.snr[i]) * kappa;
                            drop_label(dr.demand[i], cap, tau)
                        })
                        .collect()
                })
                .collect();
            let failing: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| {
                    let pos = l.iter().filter(|&&y| y == 1).count();
                    pos < MIN_CLASS_COUNT || l.len() - pos < MIN_CLASS_COUNT
                })
                .map(|(b, _)| b)
                .collect();
            if failing.is_empty() {
                break (kappa, tau, labels);
            }
            for b in failing {
                attempts[b] += 1;
                if attempts[b] as usize >= MAX_ATTEMPTS {
                    return Err(Error::Generation(format!(
                        "client (bs {b}, slice {s}) lacks both classes after {MAX_ATTEMPTS} attempts"
                    )));
                }
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b as u64, s as u64, attempts[b]]));
                draws[b] = Draw::sample(profile, d, &mut rng)?;
            }
        };

        let sigma = LATENCY_NOISE * profile.latency_base_ms;
        let mut positives = 0usize;
        for (b, (dr, y)) in draws.iter().zip(labels).enumerate() {
            let mut feats = Vec::with_capacity(d * 3);
            for i in 0..d {
                let cap = dr.prb[i] * spectral_efficiency(dr.snr[i]) * kappa;
                let latency = profile.latency_base_ms + profile.latency_load_ms * dr.demand[i] / cap + sigma * dr.noise[i];
                feats.extend_from_slice(&[dr.prb[i], latency, dr.snr[i]]);
            }
            positives += y.iter().filter(|&&v| v == 1).count();
            raw[b].push(LocalDataset::new(Matrix::new(d, 3, feats)?, y)?);
        }
        calibration.push(Calibration {
            kappa,
            tau,
            positive_rate: positives as f64 / (k * d) as f64,
        });
        let rows: Vec<&[f64]> = raw.iter().flat_map(|r| r[s].features.iter_rows()).collect();
        standardization.push(Standardization::fit(&rows, FEATURE_NAMES.len()));
    }

    Ok(DatasetGrid {
        seed,
        k,
        n,
        d,
        profiles,
        calibration,
        standardization,
        raw,
    })
}
