//! Shallow feedforward binary classifier with hand-written backpropagation.
//!
//! The network is a stack of dense layers: rectifier units on every hidden layer and a
//! logistic output `S_mu(z) = 1 / (1 + exp(-mu z))`. Gradients are exact with respect to both
//! the parameters and the inputs; the composite training objective (cross-entropy, divergence
//! between original and masked predictions, recall surrogate) is differentiated through both
//! forward passes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::egl::{self, DivergenceKind};
use crate::error::{Error, Result};
use crate::{clamp_prob, PROB_EPS};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter_rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Features and binary drop labels of one (base station, slice) client.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDataset {
    pub features: Matrix,
    pub labels: Vec<u8>,
}

impl LocalDataset {
    pub fn new(features: Matrix, labels: Vec<u8>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidArgument("dataset must hold at least one sample".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(Error::InvalidArgument(format!("label {i} is not binary")));
        }
        if features.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.len()
    }

    pub fn subset(&self, indices: &[usize]) -> LocalDataset {
        LocalDataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Stratified train/test split. Each class with at least two samples contributes at least
    /// one sample to both sides; row order is preserved within each side.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(LocalDataset, LocalDataset)> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "test fraction {test_fraction} outside (0,1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in [0u8, 1u8] {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let mut n_test = (test_fraction * idx.len() as f64).round() as usize;
            if idx.len() >= 2 {
                n_test = n_test.clamp(1, idx.len() - 1);
            } else {
                n_test = 0;
            }
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} samples into train and test",
                self.len()
            )));
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// One dense layer; `weights` is `outputs x inputs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }
}

/// Parameter-shaped gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl Gradient {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn euclidean_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// All entries, layer by layer, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    fn first_nonfinite_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()))
    }
}

/// Feedforward classifier: rectifier hidden layers, logistic output with steepness `mu`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    steepness: f64,
}

/// Default architecture: three features, two hidden layers.
pub const DEFAULT_LAYER_DIMS: [usize; 4] = [3, 16, 8, 1];

impl Model {
    fn check_dims(layer_dims: &[usize], steepness: f64) -> Result<()> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "layer_dims needs an input and an output width".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if *layer_dims.last().unwrap() != 1 {
            return Err(Error::InvalidArgument("output width must be 1".into()));
        }
        if !(steepness.is_finite() && steepness > 0.0) {
            return Err(Error::InvalidArgument(format!("steepness {steepness} must be positive")));
        }
        Ok(())
    }

    /// All-zero parameters.
    pub fn zeros(layer_dims: &[usize], steepness: f64) -> Result<Self> {
        Self::check_dims(layer_dims, steepness)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            steepness,
        })
    }

    /// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn seeded(layer_dims: &[usize], steepness: f64, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, steepness)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(model)
    }

    /// Builds a model from explicit per-layer weights (row-major, `out x in`) and biases.
    pub fn from_parameters(
        layer_dims: &[usize],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        steepness: f64,
    ) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, steepness)?;
        if weights.len() != model.layers.len() || biases.len() != model.layers.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "{} layers need {} weight and bias blocks",
                model.layers.len(),
                model.layers.len()
            )));
        }
        for (l, (w, b)) in model.layers.iter_mut().zip(weights.into_iter().zip(biases)) {
            if w.len() != l.weights.len() || b.len() != l.biases.len() {
                return Err(Error::ArchitectureMismatch(format!(
                    "layer {}x{} got {} weights and {} biases",
                    l.outputs,
                    l.inputs,
                    w.len(),
                    b.len()
                )));
            }
            if w.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite parameter".into()));
            }
            l.weights = w;
            l.biases = b;
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn steepness(&self) -> f64 {
        self.steepness
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// True when both models share layer widths and output steepness.
    pub fn is_congruent(&self, other: &Model) -> bool {
        self.layer_dims == other.layer_dims && self.steepness == other.steepness
    }

    pub fn tape(&self) -> Tape {
        Tape::new(self)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Predicted drop probability for one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut tape = self.tape();
        Ok(self.forward_with(x, &mut tape))
    }

    /// Forward pass recording activations into `tape`. `x` must have `input_dim` entries.
    #[allow(clippy::needless_range_loop)]
    pub fn forward_with(&self, x: &[f64], tape: &mut Tape) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim());
        tape.post[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = tape.post.split_at_mut(l + 1);
            let input = &before[l];
            let pre = &mut tape.pre[l];
            for o in 0..layer.outputs {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let mut z = layer.biases[o];
                for (w, a) in row.iter().zip(input) {
                    z += w * a;
                }
                pre[o] = z;
            }
            let out = &mut after[0];
            if l == last {
                // An overflowed pre-activation poisons the output instead of saturating it.
                out[0] = if pre[0].is_finite() {
                    logistic(self.steepness * pre[0])
                } else {
                    f64::NAN
                };
            } else {
                for (a, &z) in out.iter_mut().zip(pre.iter()) {
                    *a = z.max(0.0);
                }
            }
        }
        tape.post[self.layers.len()][0]
    }

    /// Backpropagates `upstream = dL/dz_out` through the activations held in `tape`.
    /// Weight gradients are accumulated into `grad`; input gradients written to `input_grad`.
    #[allow(clippy::needless_range_loop)]
    pub fn backward_with(
        &self,
        tape: &mut Tape,
        upstream: f64,
        mut grad: Option<&mut Gradient>,
        input_grad: Option<&mut [f64]>,
    ) {
        let n_layers = self.layers.len();
        tape.delta[n_layers - 1][0] = upstream;
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let input = &tape.post[l];
            let (lower, upper) = tape.delta.split_at_mut(l);
            let delta = &upper[0];
            if let Some(g) = grad.as_deref_mut() {
                let gl = &mut g.layers[l];
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gl.biases[o] += d;
                    let row = &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
            }
            if l > 0 {
                let prev = &mut lower[l - 1];
                transpose_product(layer, delta, prev);
                for (p, &z) in prev.iter_mut().zip(&tape.pre[l - 1]) {
                    *p = if z > 0.0 { *p } else { 0.0 };
                }
            } else if let Some(out) = input_grad {
                transpose_product(layer, delta, out);
                return;
            }
        }
    }

    /// Predictions for every row of `batch`.
    pub fn predict(&self, batch: &Matrix) -> Result<Vec<f64>> {
        if batch.cols() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                actual: batch.cols(),
            });
        }
        let mut tape = self.tape();
        let out: Vec<f64> = batch.iter_rows().map(|x| self.forward_with(x, &mut tape)).collect();
        if out.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericOverflow {
                layer: self.layers.len() - 1,
            });
        }
        Ok(out)
    }

    /// Gradient of the output probability with respect to the input features.
    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut tape = self.tape();
        let mut out = vec![0.0; x.len()];
        self.grad_input_with(x, &mut tape, &mut out);
        Ok(out)
    }

    /// Allocation-free input gradient; returns the forward value.
    pub fn grad_input_with(&self, x: &[f64], tape: &mut Tape, out: &mut [f64]) -> f64 {
        let p = self.forward_with(x, tape);
        let dz = self.steepness * p * (1.0 - p);
        self.backward_with(tape, dz, None, Some(out));
        p
    }

    /// Analytic gradient of `objective` over `batch`.
    pub fn grad_weights(&self, objective: &Objective<'_>, batch: &LocalDataset) -> Result<Gradient> {
        self.value_and_grad(objective, batch).map(|(_, g)| g)
    }

    /// Objective terms without the gradient.
    pub fn objective_value(&self, objective: &Objective<'_>, batch: &LocalDataset) -> Result<ObjectiveTerms> {
        self.evaluate(objective, batch, None)
    }

    pub fn value_and_grad(
        &self,
        objective: &Objective<'_>,
        batch: &LocalDataset,
    ) -> Result<(ObjectiveTerms, Gradient)> {
        let mut grad = Gradient::zeros_like(self);
        let terms = self.evaluate(objective, batch, Some(&mut grad))?;
        if let Some(layer) = grad.first_nonfinite_layer() {
            return Err(Error::NumericOverflow { layer });
        }
        Ok((terms, grad))
    }

    fn evaluate(
        &self,
        objective: &Objective<'_>,
        batch: &LocalDataset,
        mut grad: Option<&mut Gradient>,
    ) -> Result<ObjectiveTerms> {
        if batch.features.cols() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                actual: batch.features.cols(),
            });
        }
        let mu = self.steepness;
        let mut tape = self.tape();
        let mut terms = ObjectiveTerms::default();

        let use_bce = objective.bce_weight != 0.0;
        let use_surrogate = objective.surrogate_weight != 0.0;
        if use_bce || use_surrogate {
            let n = batch.len() as f64;
            let positives = batch.positives();
            if use_surrogate && positives == 0 {
                return Err(Error::UndefinedRecall);
            }
            let inv_pos = 1.0 / positives.max(1) as f64;
            let mut bce_sum = 0.0;
            let mut pos_sum = 0.0;
            for (x, &y) in batch.features.iter_rows().zip(&batch.labels) {
                let p = self.forward_with(x, &mut tape);
                let yf = f64::from(y);
                let mut dz = 0.0;
                if use_bce {
                    bce_sum += bce_loss(yf, p);
                    // dBCE/dz = mu (p - y) away from the clamp; the clamp is flat outside.
                    if p > PROB_EPS && p < 1.0 - PROB_EPS {
                        dz += objective.bce_weight / n * mu * (p - yf);
                    }
                }
                if use_surrogate && y == 1 {
                    pos_sum += p.min(1.0);
                    if p < 1.0 {
                        dz -= objective.surrogate_weight * inv_pos * mu * p * (1.0 - p);
                    }
                }
                if let Some(g) = grad.as_deref_mut() {
                    if dz != 0.0 {
                        self.backward_with(&mut tape, dz, Some(g), None);
                    }
                }
            }
            if use_bce {
                terms.bce = bce_sum / n;
                terms.total += objective.bce_weight * terms.bce;
            }
            if use_surrogate {
                terms.surrogate = pos_sum * inv_pos;
                terms.total += objective.surrogate_weight * (objective.gamma - terms.surrogate);
            }
        }

        if objective.divergence != DivergenceKind::None && objective.divergence_weight != 0.0 {
            let tester = objective.tester.as_ref().ok_or_else(|| {
                Error::InvalidArgument("divergence term needs a masked tester batch".into())
            })?;
            let (orig, masked) = (tester.original, tester.masked);
            if orig.rows() != masked.rows() || orig.cols() != masked.cols() || orig.rows() == 0 {
                return Err(Error::Dimension(format!(
                    "tester batch {}x{} vs masked {}x{}",
                    orig.rows(),
                    orig.cols(),
                    masked.rows(),
                    masked.cols()
                )));
            }
            if orig.cols() != self.input_dim() {
                return Err(Error::InputShape {
                    expected: self.input_dim(),
                    actual: orig.cols(),
                });
            }
            let n = orig.rows() as f64;
            let scale = objective.divergence_weight / n;
            let mut masked_tape = self.tape();
            let mut sum = 0.0;
            for (x, xm) in orig.iter_rows().zip(masked.iter_rows()) {
                let p_raw = self.forward_with(x, &mut tape);
                let q_raw = self.forward_with(xm, &mut masked_tape);
                let (p, sp) = clamp_with_slope(p_raw);
                let (q, sq) = clamp_with_slope(q_raw);
                let (value, dp, dq) = egl::divergence_partials(objective.divergence, p, q);
                sum += value;
                if let Some(g) = grad.as_deref_mut() {
                    let dzp = scale * dp * sp * mu * p_raw * (1.0 - p_raw);
                    let dzq = scale * dq * sq * mu * q_raw * (1.0 - q_raw);
                    if dzp != 0.0 {
                        self.backward_with(&mut tape, dzp, Some(g), None);
                    }
                    if dzq != 0.0 {
                        self.backward_with(&mut masked_tape, dzq, Some(g), None);
                    }
                }
            }
            terms.divergence = sum / n;
            terms.total += objective.divergence_weight * terms.divergence;
        }

        if !terms.total.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {}", terms.total)));
        }
        Ok(terms)
    }

    /// `self -= lr * grad`.
    pub fn descend(&mut self, grad: &Gradient, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.biases.iter_mut().zip(&g.biases) {
                *b -= lr * gb;
            }
        }
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        Model::from_parameters(&doc.layer_dims, doc.weights, doc.biases, doc.steepness)
    }
}

/// Serialised form of a [`Model`].
#[derive(Serialize, Deserialize)]
struct ModelDocument {
    layer_dims: Vec<usize>,
    steepness: f64,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<&Model> for ModelDocument {
    fn from(m: &Model) -> Self {
        Self {
            layer_dims: m.layer_dims.clone(),
            steepness: m.steepness,
            weights: m.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: m.layers.iter().map(|l| l.biases.clone()).collect(),
        }
    }
}

/// Reusable activation buffers for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Tape {
    fn new(model: &Model) -> Self {
        let dims = &model.layer_dims;
        Self {
            pre: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
            post: dims.iter().map(|&d| vec![0.0; d]).collect(),
            delta: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
        }
    }
}

/// `out = W^T delta`, accumulated row by row so every entry sums over outputs in index order.
fn transpose_product(layer: &Layer, delta: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|s| *s = 0.0);
    for (row, &d) in layer.weights.chunks_exact(layer.inputs).zip(delta) {
        for (s, w) in out.iter_mut().zip(row) {
            *s += w * d;
        }
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with the probability clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss(y: f64, p: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn clamp_with_slope(p: f64) -> (f64, f64) {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        (clamp_prob(p), 0.0)
    } else {
        (p, 1.0)
    }
}

/// Original and masked copies of the tester batch feeding the divergence term.
#[derive(Clone, Copy, Debug)]
pub struct MaskedBatch<'a> {
    pub original: &'a Matrix,
    pub masked: &'a Matrix,
}

/// Composite local objective
/// `bce_weight * BCE + divergence_weight * Div(f(x_test), f(x_test_masked)) + surrogate_weight * (gamma - s)`
/// where `s` is the mean predicted probability over positive training samples.
///
/// Terms with a zero weight are skipped entirely, so disabling them reproduces plain
/// cross-entropy training bit for bit.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub bce_weight: f64,
    pub divergence: DivergenceKind,
    pub divergence_weight: f64,
    pub tester: Option<MaskedBatch<'a>>,
    pub surrogate_weight: f64,
    pub gamma: f64,
}

impl Objective<'static> {
    pub fn bce() -> Self {
        Self {
            bce_weight: 1.0,
            ..Self::null()
        }
    }

    /// Every coefficient zero: constant objective.
    pub fn null() -> Self {
        Self {
            bce_weight: 0.0,
            divergence: DivergenceKind::None,
            divergence_weight: 0.0,
            tester: None,
            surrogate_weight: 0.0,
            gamma: 0.0,
        }
    }
}

/// Per-term breakdown of an objective evaluation. `surrogate` is the raw recall surrogate `s`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveTerms {
    pub bce: f64,
    pub divergence: f64,
    pub surrogate: f64,
    pub total: f64,
}

/// Result of [`oracle_minimize`].
#[derive(Clone, Debug)]
pub struct OracleRun {
    pub model: Model,
    pub initial: ObjectiveTerms,
    pub last: ObjectiveTerms,
    /// Fraction of steps whose objective did not increase.
    pub monotone_fraction: f64,
    pub max_grad_norm: f64,
}

/// Objective values above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Approximate minimisation oracle: `steps` iterations of full-batch gradient descent.
pub fn oracle_minimize(
    model: &Model,
    objective: &Objective<'_>,
    batch: &LocalDataset,
    steps: usize,
    lr: f64,
) -> Result<OracleRun> {
    if steps == 0 {
        return Err(Error::InvalidArgument("oracle needs at least one step".into()));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    let mut current = model.clone();
    let mut initial = None;
    let mut previous = f64::INFINITY;
    let mut monotone = 0usize;
    let mut max_grad_norm: f64 = 0.0;
    for step in 0..steps {
        let (terms, grad) = current.value_and_grad(objective, batch)?;
        if terms.total > DIVERGENCE_LIMIT {
            return Err(Error::OracleDivergence {
                step,
                value: terms.total,
            });
        }
        if step > 0 && terms.total <= previous + 1e-12 {
            monotone += 1;
        }
        previous = terms.total;
        initial.get_or_insert(terms);
        max_grad_norm = max_grad_norm.max(grad.euclidean_norm());
        current.descend(&grad, lr);
    }
    let last = current.objective_value(objective, batch)?;
    if last.total > DIVERGENCE_LIMIT || !last.total.is_finite() {
        return Err(Error::OracleDivergence {
            step: steps,
            value: last.total,
        });
    }
    if last.total <= previous + 1e-12 {
        monotone += 1;
    }
    let monotone_fraction = monotone as f64 / steps as f64;
    if monotone_fraction < 0.9 {
        log::debug!("oracle objective increased on {:.0}% of steps", 100.0 * (1.0 - monotone_fraction));
    }
    Ok(OracleRun {
        model: current,
        initial: initial.unwrap_or_default(),
        last,
        monotone_fraction,
        max_grad_norm,
    })
}

/// Convex self-test of the oracle: a single logistic unit on symmetric separable 1-D data.
/// Returns the gap between the oracle's final cross-entropy and the best value of a dense
/// grid search over the weight in `[-10, 10]` (bias fixed at zero, which is optimal by symmetry).
pub fn measure_oracle_gap(steps: usize, lr: f64) -> Result<f64> {
    let features = Matrix::new(4, 1, vec![-2.0, -1.0, 1.0, 2.0])?;
    let data = LocalDataset::new(features, vec![0, 0, 1, 1])?;
    let model = Model::zeros(&[1, 1], 1.0)?;
    let run = oracle_minimize(&model, &Objective::bce(), &data, steps, lr)?;
    let grid_best = (0..=20_000)
        .map(|i| -10.0 + 1e-3 * i as f64)
        .map(|w| {
            data.features
                .iter_rows()
                .zip(&data.labels)
                .map(|(x, &y)| bce_loss(f64::from(y), logistic(w * x[0])))
                .sum::<f64>()
                / 4.0
        })
        .fold(f64::INFINITY, f64::min);
    Ok((run.last.bce - grid_best).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: &[f64], b: f64) -> Model {
        Model::from_parameters(&[w.len(), 1], vec![w.to_vec()], vec![vec![b]], 1.0).unwrap()
    }

    #[test]
    fn logistic_midpoint() {
        let m = linear(&[1.0, 2.0, 3.0], 0.0);
        assert_eq!(m.forward(&[0.0, 0.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn wrong_arity_is_input_shape_error() {
        let m = Model::seeded(&DEFAULT_LAYER_DIMS, 1.0, 3).unwrap();
        assert!(matches!(
            m.forward(&[1.0, 2.0]),
            Err(Error::InputShape { expected: 3, actual: 2 })
        ));
        assert!(m.grad_input(&[1.0; 4]).is_err());
    }

    #[test]
    fn two_layer_forward_matches_hand_evaluation() {
        let m = Model::from_parameters(
            &[3, 2, 1],
            vec![vec![0.5, -1.0, 0.25, -0.3, 0.8, 1.1], vec![1.5, -2.0]],
            vec![vec![0.1, -0.2], vec![0.05]],
            1.0,
        )
        .unwrap();
        let x = [0.4, 0.1, 0.7];
        let h0: f64 = (0.5f64 * 0.4 - 1.0 * 0.1 + 0.25 * 0.7 + 0.1).max(0.0);
        let h1: f64 = (-0.3f64 * 0.4 + 0.8 * 0.1 + 1.1 * 0.7 - 0.2).max(0.0);
        let z = 1.5 * h0 - 2.0 * h1 + 0.05;
        let expected = 1.0 / (1.0 + (-z).exp());
        assert!((m.forward(&x).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(1.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(1.0, 0.9) - 0.10536051565782628).abs() < 1e-12);
        assert!(bce_loss(1.0, 1.0).is_finite());
        assert!(bce_loss(0.0, 1.0) > 16.0);
    }

    #[test]
    fn logistic_linear_input_gradient_closed_form() {
        let w = [0.3, -1.2, 0.7];
        let m = linear(&w, 0.2);
        let x = [0.5, 0.1, -0.4];
        let p = m.forward(&x).unwrap();
        let g = m.grad_input(&x).unwrap();
        for (gi, wi) in g.iter().zip(w) {
            assert!((gi - p * (1.0 - p) * wi).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_model_has_zero_input_gradient() {
        let m = Model::zeros(&DEFAULT_LAYER_DIMS, 1.0).unwrap();
        assert_eq!(m.grad_input(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn null_objective_has_zero_gradient_and_keeps_weights() {
        let m = Model::seeded(&DEFAULT_LAYER_DIMS, 1.0, 9).unwrap();
        let data = LocalDataset::new(
            Matrix::from_rows(&[[0.1, 0.2, 0.3], [-0.5, 0.4, 1.0]]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        let g = m.grad_weights(&Objective::null(), &data).unwrap();
        assert!(g.values().all(|v| v == 0.0));
        let run = oracle_minimize(&m, &Objective::null(), &data, 5, 0.12).unwrap();
        assert_eq!(run.model, m);
    }

    #[test]
    fn zero_steps_rejected() {
        let m = Model::zeros(&[1, 1], 1.0).unwrap();
        let data = LocalDataset::new(Matrix::new(1, 1, vec![1.0]).unwrap(), vec![1]).unwrap();
        assert!(oracle_minimize(&m, &Objective::bce(), &data, 0, 0.1).is_err());
    }

    #[test]
    fn oracle_reaches_grid_optimum_on_convex_toy() {
        let gap = measure_oracle_gap(500, 0.12).unwrap();
        assert!(gap <= 0.05, "gap {gap}");
    }

    #[test]
    fn overflowing_activations_are_numeric_errors() {
        let m = Model::from_parameters(&[1, 1], vec![vec![1e200]], vec![vec![0.0]], 1.0).unwrap();
        let data = LocalDataset::new(Matrix::from_rows(&[[1e200], [-1e200]]).unwrap(), vec![0, 1]).unwrap();
        let res = oracle_minimize(&m, &Objective::bce(), &data, 3, 0.1);
        assert!(res.unwrap_err().is_numeric());
    }

    #[test]
    fn objective_above_limit_is_divergence() {
        let m = Model::zeros(&[1, 1], 1.0).unwrap();
        let data = LocalDataset::new(Matrix::from_rows(&[[1.0], [-1.0]]).unwrap(), vec![0, 1]).unwrap();
        let objective = Objective {
            surrogate_weight: 1e7,
            gamma: 0.9,
            ..Objective::bce()
        };
        match oracle_minimize(&m, &objective, &data, 3, 0.1) {
            Err(Error::OracleDivergence { step: 0, value }) => assert!(value > DIVERGENCE_LIMIT),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = Model::seeded(&DEFAULT_LAYER_DIMS, 1.3, 77).unwrap();
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert!(m.parameters().zip(back.parameters()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.layer_dims(), m.layer_dims());
    }

    #[test]
    fn stratified_split_keeps_both_classes_on_both_sides() {
        let rows: Vec<[f64; 1]> = (0..20).map(|i| [i as f64]).collect();
        let labels = (0..20).map(|i| u8::from(i % 7 == 0)).collect();
        let d = LocalDataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
        let (train, test) = d.split(0.2, 5).unwrap();
        assert_eq!(train.len() + test.len(), 20);
        assert!(train.has_both_classes() && test.has_both_classes());
    }
}
