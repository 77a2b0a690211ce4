//! Integrated-gradients attribution of predictions onto input features.
//!
//! For an input `x`, baseline `x'` and `m` steps the attribution of feature `j` is the
//! right-Riemann estimate
//!
//! ```text
//! a_j = (x_j - x'_j) * (1/m) * sum_{s=1..m} dF/dx_j (x' + (s/m)(x - x'))
//! ```
//!
//! which is exact for functions linear in `x` and satisfies completeness
//! (`sum_j a_j -> F(x) - F(x')`) as `m` grows.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Matrix, Model, Tape};

/// Default step count used inside the training loop.
pub const TRAINING_STEPS: usize = 50;

/// A scalar function with an input gradient, explainable by integrated gradients.
pub trait Attributable {
    type Scratch;

    fn input_dim(&self) -> usize;
    fn scratch(&self) -> Self::Scratch;
    fn score(&self, x: &[f64], scratch: &mut Self::Scratch) -> f64;
    /// Writes `dF/dx` into `out`.
    fn score_gradient(&self, x: &[f64], scratch: &mut Self::Scratch, out: &mut [f64]);
}

impl Attributable for Model {
    type Scratch = Tape;

    fn input_dim(&self) -> usize {
        Model::input_dim(self)
    }

    fn scratch(&self) -> Tape {
        self.tape()
    }

    fn score(&self, x: &[f64], tape: &mut Tape) -> f64 {
        self.forward_with(x, tape)
    }

    fn score_gradient(&self, x: &[f64], tape: &mut Tape, out: &mut [f64]) {
        self.grad_input_with(x, tape, out);
    }
}

/// `F(x) = w . x + b` with no output nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearScore {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Attributable for LinearScore {
    type Scratch = ();

    fn input_dim(&self) -> usize {
        self.weights.len()
    }

    fn scratch(&self) {}

    fn score(&self, x: &[f64], _: &mut ()) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    fn score_gradient(&self, _: &[f64], _: &mut (), out: &mut [f64]) {
        out.copy_from_slice(&self.weights);
    }
}

fn check(f: &impl Attributable, x: &[f64], baseline: &[f64], steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs m >= 1".into()));
    }
    for v in [x, baseline] {
        if v.len() != f.input_dim() {
            return Err(Error::InputShape {
                expected: f.input_dim(),
                actual: v.len(),
            });
        }
    }
    if x.iter().chain(baseline).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite input or baseline".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn integrate<F: Attributable>(
    f: &F,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
    scratch: &mut F::Scratch,
    point: &mut [f64],
    grad: &mut [f64],
    out: &mut [f64],
) {
    out.iter_mut().for_each(|a| *a = 0.0);
    for s in 1..=steps {
        let t = s as f64 / steps as f64;
        for ((p, &xi), &bi) in point.iter_mut().zip(x).zip(baseline) {
            *p = bi + t * (xi - bi);
        }
        f.score_gradient(point, scratch, grad);
        for (a, g) in out.iter_mut().zip(grad.iter()) {
            *a += g;
        }
    }
    for ((a, &xi), &bi) in out.iter_mut().zip(x).zip(baseline) {
        *a *= (xi - bi) / steps as f64;
    }
}

/// Attribution vector of one input.
pub fn integrated_gradients<F: Attributable>(
    f: &F,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    check(f, x, baseline, steps)?;
    let q = x.len();
    let mut scratch = f.scratch();
    let (mut point, mut grad, mut out) = (vec![0.0; q], vec![0.0; q], vec![0.0; q]);
    integrate(f, x, baseline, steps, &mut scratch, &mut point, &mut grad, &mut out);
    if out.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric("non-finite attribution".into()));
    }
    Ok(out)
}

/// Per-sample attributions of a batch, with the baseline and step count that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMatrix {
    pub values: Matrix,
    pub baseline: Vec<f64>,
    pub steps: usize,
}

impl AttributionMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn features(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    /// CSV with one row per sample and a header of feature names.
    pub fn write_csv<W: Write>(&self, out: W, feature_names: &[&str]) -> Result<()> {
        if feature_names.len() != self.features() {
            return Err(Error::Dimension(format!(
                "{} names for {} features",
                feature_names.len(),
                self.features()
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(feature_names)?;
        for row in self.values.iter_rows() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<attributions>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, feature_names: &[&str]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), feature_names)
    }
}

/// Row-wise integrated gradients over `batch` with a shared baseline and step count.
pub fn attribution_matrix<F: Attributable>(
    f: &F,
    batch: &Matrix,
    baseline: &[f64],
    steps: usize,
) -> Result<AttributionMatrix> {
    if batch.rows() == 0 {
        return Err(Error::InvalidArgument("attribution batch is empty".into()));
    }
    let q = f.input_dim();
    if batch.cols() != q {
        return Err(Error::InputShape {
            expected: q,
            actual: batch.cols(),
        });
    }
    if let Some(first) = batch.iter_rows().next() {
        check(f, first, baseline, steps)?;
    }
    let mut values = Matrix::zeros(batch.rows(), q);
    let mut scratch = f.scratch();
    let (mut point, mut grad) = (vec![0.0; q], vec![0.0; q]);
    for i in 0..batch.rows() {
        let x = batch.row(i);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite input in row {i}")));
        }
        integrate(f, x, baseline, steps, &mut scratch, &mut point, &mut grad, values.row_mut(i));
    }
    if values.as_slice().iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric("non-finite attribution".into()));
    }
    Ok(AttributionMatrix {
        values,
        baseline: baseline.to_vec(),
        steps,
    })
}
