//! Extreme learning machine over an uncontrolled channel.
//!
//! Each input feature drives one TX antenna; the fading matrix acts as a
//! fixed random hidden layer, each RX element applies a nonlinearity, and
//! only the linear readout is fitted, in closed form.

use crate::channel::{complex_gaussian, noise_power, rayleigh_channel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::par::{self, Execution};
use crate::tensor::{cgemm, dgemm, Tensor, Trans, C64};
use crate::wave::argmax;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Abs,
    Abs2,
    TanhMag,
    ReluReal,
}

impl Activation {
    pub fn apply(self, z: C64) -> f64 {
        match self {
            Activation::Abs => z.norm_sqr().sqrt(),
            Activation::Abs2 => z.norm_sqr(),
            Activation::TanhMag => z.norm_sqr().sqrt().tanh(),
            Activation::ReluReal => z.re.max(0.0),
        }
    }
}

/// Where the hidden weights come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenLayer {
    /// CN(0, 1) fading between TX antennas and RX elements.
    #[default]
    Rayleigh,
    /// Real N(0, 1) weights of a conventional digital ELM.
    Gaussian,
}

/// Ridge factor relative to `trace(GᵀG)/h` when no absolute value is given.
pub const RELATIVE_RIDGE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElmConfig {
    pub n_hidden: usize,
    pub activation: Activation,
    pub hidden_layer: HiddenLayer,
    /// Absolute ridge weight; `None` uses [`RELATIVE_RIDGE`].
    pub ridge_lambda: Option<f64>,
    /// Receiver SNR before the nonlinearity; `inf` disables noise.
    pub snr_db: f64,
    /// Drive one extra TX antenna with a constant unit amplitude, giving
    /// every hidden unit an offset. Without it `|H·x|` is even in `x`.
    pub reference_antenna: bool,
}

impl Default for ElmConfig {
    fn default() -> Self {
        ElmConfig {
            n_hidden: 256,
            activation: Activation::Abs,
            hidden_layer: HiddenLayer::Rayleigh,
            ridge_lambda: None,
            snr_db: f64::INFINITY,
            reference_antenna: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElmModel {
    /// Hidden weights `[n_hidden, n_features]`, plus one trailing column
    /// for the reference antenna when enabled.
    pub h: Tensor,
    pub activation: Activation,
    /// Ridge weight used by the last fit.
    pub ridge_lambda: f64,
    /// Noise variance added to `H·x` before the nonlinearity.
    pub noise_sigma2: f64,
    /// Readout `[n_hidden, outputs]`; one output column for binary tasks.
    pub w: Option<Vec<f64>>,
    pub classes: usize,
    cfg: ElmConfig,
}

impl ElmModel {
    pub fn new(cfg: &ElmConfig, n_features: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if cfg.n_hidden == 0 || n_features == 0 || classes < 2 {
            return Err(Error::Config("ELM needs n_hidden ≥ 1, n_features ≥ 1 and ≥ 2 classes".into()));
        }
        if cfg.ridge_lambda.is_some_and(|l| !(l > 0.0)) || cfg.snr_db.is_nan() {
            return Err(Error::Config("ridge_lambda must be positive and snr_db a number".into()));
        }
        Ok(ElmModel {
            h: draw_hidden(cfg.hidden_layer, cfg.n_hidden, n_features + usize::from(cfg.reference_antenna), rng),
            activation: cfg.activation,
            ridge_lambda: cfg.ridge_lambda.unwrap_or(0.0),
            noise_sigma2: 0.0,
            w: None,
            classes,
            cfg: cfg.clone(),
        })
    }

    /// Reassembles a model from stored state, checking shapes.
    pub fn from_parts(cfg: ElmConfig, h: Tensor, w: Option<Vec<f64>>, ridge_lambda: f64, noise_sigma2: f64, classes: usize) -> Result<Self> {
        let &[rows, cols] = h.shape() else {
            return Err(Error::shape("elm hidden matrix", h.shape(), &[cfg.n_hidden, 0]));
        };
        if rows != cfg.n_hidden || cols <= usize::from(cfg.reference_antenna) || classes < 2 {
            return Err(Error::shape("elm hidden matrix", h.shape(), &[cfg.n_hidden, 0]));
        }
        let m = ElmModel { h, activation: cfg.activation, ridge_lambda, noise_sigma2, w: None, classes, cfg };
        if let Some(w) = &w {
            if w.len() != rows * m.outputs() {
                return Err(Error::shape("elm readout", &[w.len()], &[rows, m.outputs()]));
            }
        }
        Ok(ElmModel { w, ..m })
    }

    pub fn config(&self) -> &ElmConfig {
        &self.cfg
    }

    pub fn n_hidden(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.h.shape()[1] - usize::from(self.cfg.reference_antenna)
    }

    fn outputs(&self) -> usize {
        if self.classes == 2 { 1 } else { self.classes }
    }

    /// Hidden activations for every row of `data`, `[n, n_hidden]`. With
    /// noise enabled each row uses its own stream derived from `seed`.
    pub fn hidden_matrix(&self, data: &Dataset, seed: u64, exec: Execution) -> Result<Vec<f64>> {
        if data.dim() != self.n_features() {
            return Err(Error::shape("elm_hidden", &[data.dim()], &[self.n_features()]));
        }
        let z = self.received_batch(data);
        let h = self.n_hidden();
        let rows = par::map_indexed(data.len(), exec, |i| {
            let z = &z[i * h..][..h];
            if self.noise_sigma2 > 0.0 {
                let mut rng = crate::train::stream(seed, i as u64);
                let sd = self.noise_sigma2.sqrt();
                z.iter().map(|&z| self.activation.apply(z + complex_gaussian(&mut rng) * sd)).collect()
            } else {
                z.iter().map(|&z| self.activation.apply(z)).collect::<Vec<_>>()
            }
        });
        Ok(rows.concat())
    }

    /// `X·Hᵀ` for every row at once, `[n, n_hidden]`.
    fn received_batch(&self, data: &Dataset) -> Vec<C64> {
        let (h, cols) = (self.n_hidden(), self.h.shape()[1]);
        let d = data.dim();
        let mut x = vec![C64::new(1.0, 0.0); data.len() * cols];
        for i in 0..data.len() {
            for (dst, &v) in x[i * cols..][..d].iter_mut().zip(data.row(i)) {
                *dst = C64::new(v, 0.0);
            }
        }
        let mut z = vec![C64::new(0.0, 0.0); data.len() * h];
        let hv = self.h.as_complex().expect("complex hidden weights");
        cgemm(Trans::No, Trans::Yes, data.len(), cols, h, C64::new(1.0, 0.0), &x, hv, C64::new(0.0, 0.0), &mut z);
        z
    }

    /// Sets the noise level from the mean received power `|H·x|²` over `data`.
    pub fn calibrate_noise(&mut self, data: &Dataset) -> Result<()> {
        if !self.cfg.snr_db.is_finite() {
            self.noise_sigma2 = 0.0;
            return Ok(());
        }
        if data.is_empty() {
            return Err(Error::Config("empty calibration batch".into()));
        }
        let total: f64 = (0..data.len()).map(|i| received(data.row(i), &self.h).iter().map(|z| z.norm_sqr()).sum::<f64>()).sum();
        let ref_p = total / (data.len() * self.n_hidden()) as f64;
        self.noise_sigma2 = noise_power(ref_p, self.cfg.snr_db);
        Ok(())
    }

    /// Calibrates noise and fits the readout on `data`.
    pub fn fit(&mut self, data: &Dataset, seed: u64, exec: Execution) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        if data.classes != self.classes {
            return Err(Error::Config(format!("dataset has {} classes, model {}", data.classes, self.classes)));
        }
        self.calibrate_noise(data)?;
        let g = self.hidden_matrix(data, seed, exec)?;
        let y = targets(&data.labels, self.classes)?;
        let h = self.n_hidden();
        let lambda = match self.cfg.ridge_lambda {
            Some(l) => l,
            None => default_ridge(&g, data.len(), h),
        };
        self.w = Some(fit_readout(&g, data.len(), h, &y, self.outputs(), lambda)?);
        self.ridge_lambda = lambda;
        Ok(())
    }

    /// Raw readout outputs for one sample.
    pub fn scores(&self, g: &[f64]) -> Result<Vec<f64>> {
        let w = self.w.as_ref().ok_or_else(|| Error::State("ELM readout has not been fitted".into()))?;
        let c = self.outputs();
        let mut out = vec![0.0; c];
        for (i, gi) in g.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(&w[i * c..][..c]) {
                *o += gi * wv;
            }
        }
        Ok(out)
    }

    fn decide(&self, g: &[f64]) -> Result<usize> {
        let s = self.scores(g)?;
        Ok(if self.classes == 2 { usize::from(s[0] > 0.0) } else { argmax(&s) })
    }

    /// Fraction of correctly classified rows, with the model's noise level.
    pub fn accuracy(&self, data: &Dataset, seed: u64, exec: Execution) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("evaluation set is empty".into()));
        }
        let g = self.hidden_matrix(data, seed, exec)?;
        let h = self.n_hidden();
        let mut correct = 0;
        for (i, &y) in data.labels.iter().enumerate() {
            if self.decide(&g[i * h..][..h])? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

fn draw_hidden(kind: HiddenLayer, rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    match kind {
        HiddenLayer::Rayleigh => rayleigh_channel(rows, cols, rng),
        HiddenLayer::Gaussian => {
            let v = (0..rows * cols).map(|_| C64::new(rng.sample(StandardNormal), 0.0)).collect();
            Tensor::complex(&[rows, cols], v).expect("length matches")
        }
    }
}

fn received(x: &[f64], h: &Tensor) -> Vec<C64> {
    let hv = h.as_complex().expect("complex hidden weights");
    let cols = h.shape()[1];
    hv.chunks(cols)
        .map(|row| {
            let z: C64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            // A trailing column belongs to the unit-amplitude reference antenna.
            if cols > x.len() { z + row[cols - 1] } else { z }
        })
        .collect()
}

fn hidden_unchecked(x: &[f64], model: &ElmModel) -> Vec<f64> {
    received(x, &model.h).into_iter().map(|z| model.activation.apply(z)).collect()
}

/// Noise-free hidden response `activation(H·x)`.
pub fn elm_hidden(x: &[f64], model: &ElmModel) -> Result<Vec<f64>> {
    if x.len() != model.n_features() {
        return Err(Error::shape("elm_hidden", &[x.len()], &[model.n_features()]));
    }
    Ok(hidden_unchecked(x, model))
}

/// Predicted class of one sample.
pub fn elm_predict(x: &[f64], model: &ElmModel) -> Result<usize> {
    let g = elm_hidden(x, model)?;
    model.decide(&g)
}

/// Regression targets: a single ±1 column for two classes, one-hot
/// otherwise.
pub fn targets(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Range(format!("label {bad} outside 0..{classes}")));
    }
    Ok(if classes == 2 {
        labels.iter().map(|&y| if y == 1 { 1.0 } else { -1.0 }).collect()
    } else {
        let mut y = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            y[i * classes + l] = 1.0;
        }
        y
    })
}

/// `RELATIVE_RIDGE · trace(GᵀG) / h`, floored so an all-zero `G` still
/// gives a positive weight.
pub fn default_ridge(g: &[f64], n: usize, h: usize) -> f64 {
    let trace: f64 = g[..n * h].iter().map(|v| v * v).sum();
    (RELATIVE_RIDGE * trace / h as f64).max(f64::MIN_POSITIVE)
}

/// `W = (GᵀG + λI)⁻¹ GᵀY` for `G: [n×h]`, `Y: [n×c]`. When `n < h` the
/// equivalent `Gᵀ(GGᵀ + λI)⁻¹Y` is solved instead.
pub fn fit_readout(g: &[f64], n: usize, h: usize, y: &[f64], c: usize, lambda: f64) -> Result<Vec<f64>> {
    if n == 0 || g.len() != n * h || y.len() != n * c {
        return Err(Error::shape("fit_readout", &[n, h], &[y.len() / c.max(1), c]));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("ridge_lambda must be positive and finite, got {lambda}")));
    }
    if g.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite entries in the readout problem".into()));
    }
    if n >= h {
        let mut a = vec![0.0; h * h];
        dgemm(Trans::Yes, Trans::No, h, n, h, 1.0, g, g, 0.0, &mut a);
        for i in 0..h {
            a[i * h + i] += lambda;
        }
        let mut b = vec![0.0; h * c];
        dgemm(Trans::Yes, Trans::No, h, n, c, 1.0, g, y, 0.0, &mut b);
        cholesky_in_place(&mut a, h)?;
        cholesky_solve(&a, h, &mut b, c);
        Ok(b)
    } else {
        let mut a = vec![0.0; n * n];
        dgemm(Trans::No, Trans::Yes, n, h, n, 1.0, g, g, 0.0, &mut a);
        for i in 0..n {
            a[i * n + i] += lambda;
        }
        let mut b = y.to_vec();
        cholesky_in_place(&mut a, n)?;
        cholesky_solve(&a, n, &mut b, c);
        let mut w = vec![0.0; h * c];
        dgemm(Trans::Yes, Trans::No, h, n, c, 1.0, g, &b, 0.0, &mut w);
        Ok(w)
    }
}

/// Swaps in a new hidden realization and refits the readout on a labeled
/// calibration batch. No gradient iterations are involved.
pub fn refit_on_drift(model: &mut ElmModel, new_h: Tensor, batch: &Dataset, seed: u64, exec: Execution) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty calibration batch".into()));
    }
    if new_h.shape() != model.h.shape() || new_h.is_real() {
        return Err(Error::shape("refit_on_drift", new_h.shape(), model.h.shape()));
    }
    model.h = new_h;
    model.fit(batch, seed, exec)
}

/// `H' = H + ε·‖H‖·E/‖E‖` with complex Gaussian `E`: a relative drift of `ε`.
pub fn perturb_hidden(h: &Tensor, epsilon: f64, rng: &mut impl Rng) -> Tensor {
    let hv = h.to_complex_vec();
    let e: Vec<C64> = hv.iter().map(|_| complex_gaussian(rng)).collect();
    let en: f64 = e.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let scale = epsilon * h.norm_sqr().sqrt() / en;
    let v = hv.iter().zip(&e).map(|(a, b)| a + b * scale).collect();
    Tensor::complex(h.shape(), v).expect("length matches")
}

/// Mean test accuracy of freshly drawn ELMs over `trials` initializations.
pub fn mean_accuracy(
    cfg: &ElmConfig,
    train: &Dataset,
    test: &Dataset,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Config("trials must be ≥ 1".into()));
    }
    let accs = par::try_map_indexed(trials, exec, |t| {
        let mut rng = crate::train::stream(seed, t as u64);
        let mut m = ElmModel::new(cfg, train.dim(), train.classes, &mut rng)?;
        m.fit(train, rng.random(), Execution::Sequential)?;
        m.accuracy(test, rng.random(), Execution::Sequential)
    })?;
    Ok(accs.iter().sum::<f64>() / trials as f64)
}
