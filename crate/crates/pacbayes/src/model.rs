//! Small MLP classifier: forward evaluation, bounded losses, empirical risk,
//! and exact reverse-mode gradients.
//!
//! Parameters live in one flat vector, layer-major: for each layer the weight
//! matrix in row-major `(fan_out, fan_in)` order, then the biases. The
//! cross-entropy loss is clamped at `p_min` and rescaled so it lands in
//! `[0, 1]`, which the PAC-Bayes machinery requires:
//!
//! ```text
//! loss = -ln(max(p_label, p_min)) / ln(1/p_min)
//! ```
//!
//! Below the clamp the loss is locally constant, so clamped examples
//! contribute zero gradient.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::bounds::LossKind;
use crate::error::{Error, Result};

/// Default clamp probability for the bounded cross-entropy loss.
pub const DEFAULT_P_MIN: f64 = 1e-4;

/// Hidden-layer nonlinearity. The experiments use ReLU throughout; tanh is
/// provided for sensitivity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Derivative expressed through the activation value.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Layer widths from input to output.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpArchitecture {
    widths: Vec<usize>,
}

impl MlpArchitecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Shape(format!(
                "architecture needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|w| *w == 0) {
            return Err(Error::Shape(format!("zero-width layer in {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.widths.windows(2).map(|w| (w[0], w[1]))
    }

    /// Total parameter count: `sum fan_in*fan_out + fan_out`.
    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| i * o + o).sum()
    }
}

/// MLP predictor: affine layers with a hidden nonlinearity and softmax output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub arch: MlpArchitecture,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(arch: MlpArchitecture) -> Self {
        Self {
            arch,
            activation: Activation::Relu,
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        let want = self.arch.param_count();
        if params.len() != want {
            return Err(Error::Shape(format!(
                "parameter vector length {} != architecture count {want}",
                params.len()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.arch.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} != architecture input dim {}",
                inputs.ncols(),
                self.arch.input_dim()
            )));
        }
        Ok(())
    }

    /// Splits the flat vector into per-layer weight and bias views.
    fn layer_views<'a>(
        &self,
        params: &'a [f64],
    ) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
        let mut out = Vec::with_capacity(self.arch.widths().len() - 1);
        let mut offset = 0;
        for (fan_in, fan_out) in self.arch.layers() {
            let w = ArrayView2::from_shape(
                (fan_out, fan_in),
                &params[offset..offset + fan_in * fan_out],
            )
            .expect("layout fixed by construction");
            offset += fan_in * fan_out;
            let b = ArrayView1::from(&params[offset..offset + fan_out]);
            offset += fan_out;
            out.push((w, b));
        }
        out
    }

    /// Activations of every layer; the last entry holds softmax probabilities.
    fn forward_layers(
        &self,
        params: &[f64],
        inputs: ArrayView2<'_, f64>,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_params(params)?;
        self.check_inputs(&inputs)?;
        let layers = self.layer_views(params);
        let n_layers = layers.len();
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        for (l, (w, b)) in layers.iter().enumerate() {
            let prev = if l == 0 { inputs } else { acts[l - 1].view() };
            let mut z = prev.dot(&w.t());
            z += b;
            if l + 1 < n_layers {
                self.activation.apply(&mut z);
            } else {
                softmax_rows(&mut z);
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Class probabilities, one row per input, rows summing to one.
    pub fn forward(&self, params: &[f64], inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_layers(params, inputs)?.pop().unwrap())
    }

    /// Mean bounded cross-entropy and 0-1 error in a single forward pass.
    pub fn risks(
        &self,
        params: &[f64],
        inputs: ArrayView2<'_, f64>,
        labels: &[u8],
        p_min: f64,
    ) -> Result<(f64, f64)> {
        let probs = self.forward(params, inputs)?;
        check_labels(&probs, labels, self.arch.class_count())?;
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(
                "forward pass produced non-finite probabilities".into(),
            ));
        }
        let mut ce = 0.0;
        let mut zo = 0.0;
        for (row, &y) in probs.rows().into_iter().zip(labels) {
            ce += bounded_ce_loss(row, y, p_min);
            zo += zero_one_loss(row, y);
        }
        let n = labels.len() as f64;
        Ok((ce / n, zo / n))
    }

    /// Mean loss of the requested kind.
    pub fn empirical_risk(
        &self,
        params: &[f64],
        inputs: ArrayView2<'_, f64>,
        labels: &[u8],
        kind: LossKind,
        p_min: f64,
    ) -> Result<f64> {
        let (ce, zo) = self.risks(params, inputs, labels, p_min)?;
        Ok(match kind {
            LossKind::BoundedCe => ce,
            LossKind::ZeroOne => zo,
        })
    }

    /// Bounded cross-entropy risk and its exact gradient via backpropagation.
    ///
    /// Errors out if any intermediate quantity is non-finite instead of
    /// clipping silently.
    pub fn ce_risk_and_grad(
        &self,
        params: &[f64],
        inputs: ArrayView2<'_, f64>,
        labels: &[u8],
        p_min: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let acts = self.forward_layers(params, inputs)?;
        let probs = acts.last().unwrap();
        check_labels(probs, labels, self.arch.class_count())?;
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(
                "forward pass produced non-finite probabilities".into(),
            ));
        }
        let n = labels.len();
        let n_f = n as f64;
        let scale = -1.0 / p_min.ln();

        let mut risk = 0.0;
        // Output delta: (P - onehot) * scale / n on unclamped rows, zero on
        // clamped rows where the loss sits in its flat region.
        let mut delta = probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            let p_label = probs[(i, y as usize)];
            risk += -(p_label.max(p_min)).ln() * scale;
            if p_label < p_min {
                delta.row_mut(i).fill(0.0);
            } else {
                delta[(i, y as usize)] -= 1.0;
            }
        }
        risk /= n_f;
        if !risk.is_finite() {
            return Err(Error::NonFinite(format!("empirical risk is {risk}")));
        }
        delta.mapv_inplace(|v| v * scale / n_f);

        let layers = self.layer_views(params);
        let mut grad = vec![0.0; params.len()];
        // Per-layer flat offsets, for writing gradients back in order.
        let mut offsets = Vec::with_capacity(layers.len());
        {
            let mut off = 0;
            for (fan_in, fan_out) in self.arch.layers() {
                offsets.push(off);
                off += fan_in * fan_out + fan_out;
            }
        }
        for l in (0..layers.len()).rev() {
            let prev: ArrayView2<f64> = if l == 0 { inputs } else { acts[l - 1].view() };
            let dw = delta.t().dot(&prev);
            let db = delta.sum_axis(Axis(0));
            let (fan_in, fan_out) = (prev.ncols(), delta.ncols());
            let off = offsets[l];
            grad[off..off + fan_in * fan_out].copy_from_slice(dw.as_slice().unwrap());
            grad[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]
                .copy_from_slice(db.as_slice().unwrap());
            if l > 0 {
                let mut next = delta.dot(&layers[l].0);
                next.zip_mut_with(&acts[l - 1], |d, a| {
                    *d *= self.activation.derivative_from_output(*a)
                });
                delta = next;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient has non-finite entries".into()));
        }
        Ok((risk, grad))
    }
}

fn check_labels(probs: &Array2<f64>, labels: &[u8], k: usize) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows vs {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Domain(
            "empirical risk needs a non-empty dataset".into(),
        ));
    }
    if let Some(bad) = labels.iter().find(|y| **y as usize >= k) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// In-place, numerically stable row softmax.
fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Cross-entropy clamped at `p_min` and rescaled into `[0, 1]`.
///
/// The denominator is written as `-ln(p_min)` so a clamped example scores
/// exactly 1.
pub fn bounded_ce_loss(probs: ArrayView1<'_, f64>, label: u8, p_min: f64) -> f64 {
    (probs[label as usize].max(p_min)).ln() / p_min.ln()
}

/// 0-1 loss with deterministic lowest-index tie-breaking on the argmax.
pub fn zero_one_loss(probs: ArrayView1<'_, f64>, label: u8) -> f64 {
    let mut best = 0usize;
    let mut best_p = f64::NEG_INFINITY;
    for (k, &p) in probs.iter().enumerate() {
        if p > best_p {
            best_p = p;
            best = k;
        }
    }
    if best == label as usize {
        0.0
    } else {
        1.0
    }
}
