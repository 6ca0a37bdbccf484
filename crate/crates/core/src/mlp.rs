//! Fully connected ReLU network trained with Adam on standardized inputs and targets.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widths of the paper network for a 7-DoF arm.
pub const PAPER_SIZES: [usize; 4] = [49, 128, 128, 7];

/// Row chunk for full-data loss evaluation.
const EVAL_ROWS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major `inputs × outputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Affine maps applied before the first and after the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

impl Scaling {
    pub fn identity(inputs: usize, outputs: usize) -> Self {
        Scaling {
            input_mean: vec![0.0; inputs],
            input_std: vec![1.0; inputs],
            output_mean: vec![0.0; outputs],
            output_std: vec![1.0; outputs],
        }
    }

    /// Column statistics of `x` and `targets`; constant columns keep unit scale.
    pub fn from_data(x: &DMatrix<f64>, targets: &DMatrix<f64>) -> Self {
        let (input_mean, input_std) = column_stats(x);
        let (output_mean, output_std) = column_stats(targets);
        Scaling {
            input_mean,
            input_std,
            output_mean,
            output_std,
        }
    }
}

fn column_stats(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows().max(1) as f64;
    m.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            (mean, if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 })
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    scaling: Scaling,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
    scaling: Scaling,
}

impl From<Mlp> for MlpFile {
    fn from(m: Mlp) -> Self {
        let layers = m
            .weights
            .iter()
            .zip(&m.biases)
            .map(|(w, b)| Layer {
                weights: w.transpose().as_slice().to_vec(),
                bias: b.as_slice().to_vec(),
            })
            .collect();
        MlpFile {
            sizes: m.sizes,
            layers,
            scaling: m.scaling,
        }
    }
}

impl TryFrom<MlpFile> for Mlp {
    type Error = Error;

    fn try_from(f: MlpFile) -> Result<Self> {
        if f.sizes.len() < 2 || f.layers.len() != f.sizes.len() - 1 {
            return Err(Error::Data("network layer count does not match sizes".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (k, l) in f.layers.iter().enumerate() {
            let (i, o) = (f.sizes[k], f.sizes[k + 1]);
            if l.weights.len() != i * o || l.bias.len() != o {
                return Err(Error::Data(format!("layer {k} parameter count mismatch")));
            }
            weights.push(DMatrix::from_row_slice(i, o, &l.weights));
            biases.push(DVector::from_vec(l.bias.clone()));
        }
        let s = &f.scaling;
        let (inputs, outputs) = (f.sizes[0], *f.sizes.last().unwrap());
        if s.input_mean.len() != inputs
            || s.input_std.len() != inputs
            || s.output_mean.len() != outputs
            || s.output_std.len() != outputs
        {
            return Err(Error::Data("standardization constants do not match network widths".into()));
        }
        let net = Mlp {
            sizes: f.sizes,
            weights,
            biases,
            scaling: f.scaling,
        };
        net.check_finite()?;
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 1024,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning_rate and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam moments must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Mlp {
    /// Uniform initialization in ±1/√fan_in with identity scaling.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[0], w[1], |_, _| rng.random_range(-bound..bound)));
            biases.push(DVector::from_fn(w[1], |_, _| rng.random_range(-bound..bound)));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
            scaling: Scaling::identity(sizes[0], *sizes.last().unwrap()),
        })
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Result<Self> {
        if scaling.input_mean.len() != self.inputs() || scaling.output_mean.len() != self.outputs() {
            return Err(Error::Dimension {
                what: "standardization width",
                expected: self.inputs(),
                got: scaling.input_mean.len(),
            });
        }
        self.scaling = scaling;
        Ok(self)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::Numeric("network parameters are not finite".into()))
        }
    }

    fn check_width(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.inputs() {
            return Err(Error::Dimension {
                what: "network input width",
                expected: self.inputs(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn standardize_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let s = &self.scaling;
        DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - s.input_mean[c]) / s.input_std[c])
    }

    /// Targets in the standardized output space, after removing an optional base.
    fn standardize_targets(&self, y: &DMatrix<f64>, base: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let s = &self.scaling;
        DMatrix::from_fn(y.nrows(), y.ncols(), |r, c| {
            let b = base.map_or(0.0, |b| b[(r, c)]);
            (y[(r, c)] - b - s.output_mean[c]) / s.output_std[c]
        })
    }

    /// Raw network on standardized inputs; returns activations per layer.
    fn forward_raw(&self, z: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = vec![z.clone()];
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut h = acts.last().unwrap() * w;
            for (mut col, bias) in h.column_iter_mut().zip(b.iter()) {
                if k < last {
                    col.apply(|v| *v = (*v + bias).max(0.0));
                } else {
                    col.add_scalar_mut(*bias);
                }
            }
            acts.push(h);
        }
        acts
    }

    /// Network output in target units.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(x)?;
        let out = self.forward_raw(&self.standardize_inputs(x)).pop().unwrap();
        let s = &self.scaling;
        Ok(DMatrix::from_fn(out.nrows(), out.ncols(), |r, c| {
            out[(r, c)] * s.output_std[c] + s.output_mean[c]
        }))
    }

    /// Mean squared error in standardized output units and its gradients.
    fn loss_and_grad(&self, z: &DMatrix<f64>, t: &DMatrix<f64>) -> (f64, Gradients) {
        let acts = self.forward_raw(z);
        let out = acts.last().unwrap();
        let scale = 2.0 / (out.len() as f64);
        let err = out - t;
        let loss = err.norm_squared() / out.len() as f64;
        let mut delta = err * scale;
        let layers = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); layers];
        let mut gb = vec![DVector::zeros(0); layers];
        for k in (0..layers).rev() {
            gw[k] = acts[k].transpose() * &delta;
            gb[k] = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            if k > 0 {
                let mut back = &delta * self.weights[k].transpose();
                back.zip_apply(&acts[k], |d, a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        (loss, Gradients { weights: gw, biases: gb })
    }

    /// Loss in standardized units on the full data, as used for the training curve.
    pub fn loss(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, base: Option<&DMatrix<f64>>) -> Result<f64> {
        self.check_rows(x, y, base)?;
        let z = self.standardize_inputs(x);
        let t = self.standardize_targets(y, base);
        let out = self.forward_raw(&z).pop().unwrap();
        Ok((out - t).norm_squared() / y.len().max(1) as f64)
    }

    /// Backpropagated gradients of [`loss`](Self::loss).
    pub fn gradients(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, base: Option<&DMatrix<f64>>) -> Result<Gradients> {
        self.check_rows(x, y, base)?;
        let z = self.standardize_inputs(x);
        let t = self.standardize_targets(y, base);
        Ok(self.loss_and_grad(&z, &t).1)
    }

    fn check_rows(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, base: Option<&DMatrix<f64>>) -> Result<()> {
        self.check_width(x)?;
        if y.nrows() != x.nrows() || y.ncols() != self.outputs() {
            return Err(Error::Dimension {
                what: "network targets",
                expected: x.nrows(),
                got: y.nrows(),
            });
        }
        if let Some(b) = base {
            if b.shape() != y.shape() {
                return Err(Error::Dimension {
                    what: "residual base",
                    expected: y.nrows(),
                    got: b.nrows(),
                });
            }
        }
        Ok(())
    }
}

/// Minibatch Adam on the standardized MSE. With `residual_base` the network output is added
/// to the base inside the loss. Returns the trained network and the full-data loss before
/// training and after each epoch.
pub fn train(
    net: &Mlp,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &TrainConfig,
    residual_base: Option<&DMatrix<f64>>,
) -> Result<(Mlp, Vec<f64>)> {
    cfg.validate()?;
    net.check_rows(x, y, residual_base)?;
    let mut net = net.clone();
    let z = net.standardize_inputs(x);
    let t = net.standardize_targets(y, residual_base);
    let full_loss = |n: &Mlp| {
        let mut sum = 0.0;
        for s in (0..z.nrows()).step_by(EVAL_ROWS) {
            let len = EVAL_ROWS.min(z.nrows() - s);
            let out = n.forward_raw(&z.rows(s, len).into_owned()).pop().unwrap();
            sum += (out - t.rows(s, len)).norm_squared();
        }
        sum / t.len().max(1) as f64
    };
    let mut curve = vec![full_loss(&net)];
    if cfg.epochs == 0 {
        return Ok((net, curve));
    }
    let mut mw: Vec<DMatrix<f64>> = net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut vw = mw.clone();
    let mut mb: Vec<DVector<f64>> = net.biases.iter().map(|b| DVector::zeros(b.len())).collect();
    let mut vb = mb.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut step = 0i32;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let zb = z.select_rows(chunk.iter());
            let tb = t.select_rows(chunk.iter());
            let (loss, g) = net.loss_and_grad(&zb, &tb);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, step {step}; lower the learning rate (now {})",
                    cfg.learning_rate
                )));
            }
            step += 1;
            let c1 = 1.0 - cfg.beta1.powi(step);
            let c2 = 1.0 - cfg.beta2.powi(step);
            let lr = cfg.learning_rate;
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            };
            for k in 0..net.weights.len() {
                for (((p, g), m), v) in net.weights[k]
                    .iter_mut()
                    .zip(g.weights[k].iter())
                    .zip(mw[k].iter_mut())
                    .zip(vw[k].iter_mut())
                {
                    update(p, *g, m, v);
                }
                for (((p, g), m), v) in net.biases[k]
                    .iter_mut()
                    .zip(g.biases[k].iter())
                    .zip(mb[k].iter_mut())
                    .zip(vb[k].iter_mut())
                {
                    update(p, *g, m, v);
                }
            }
        }
        let l = full_loss(&net);
        if !l.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss after epoch {epoch}; lower the learning rate (now {})",
                cfg.learning_rate
            )));
        }
        log::debug!("epoch {} loss {l:.6e}", epoch + 1);
        curve.push(l);
    }
    Ok((net, curve))
}

/// Largest relative deviation between backpropagated and central-difference gradients.
pub fn gradient_check(net: &Mlp, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    const H: f64 = 1e-5;
    let g = net.gradients(x, y, None)?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let mut compare = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * H);
        let denom = analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic - numeric).abs() / denom);
    };
    for k in 0..net.weights.len() {
        for i in 0..net.weights[k].len() {
            let p0 = probe.weights[k][i];
            probe.weights[k][i] = p0 + H;
            let plus = probe.loss(x, y, None)?;
            probe.weights[k][i] = p0 - H;
            let minus = probe.loss(x, y, None)?;
            probe.weights[k][i] = p0;
            compare(g.weights[k][i], plus, minus);
        }
        for i in 0..net.biases[k].len() {
            let p0 = probe.biases[k][i];
            probe.biases[k][i] = p0 + H;
            let plus = probe.loss(x, y, None)?;
            probe.biases[k][i] = p0 - H;
            let minus = probe.loss(x, y, None)?;
            probe.biases[k][i] = p0;
            compare(g.biases[k][i], plus, minus);
        }
    }
    Ok(worst)
}
