//! Matrix approximation with a metasurface stack, and over-the-air alignment
//! of an encoder from one trained link with the decoder of another.
//!
//! Encodings are complex column matrices `[d, n]`: one power-normalized
//! transmit block per sample.

use crate::channel::{complex_gaussian, noise_power};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::complex_least_squares;
use crate::minn::{MinnModel, PowerMode};
use crate::par::{self, Execution};
use crate::tensor::{Tape, Tensor, Var, C64};
use crate::train::stream;
use crate::wave::{argmax, sim_apply, SimStack};
use rand::Rng;
use std::f64::consts::PI;

const BATCH: usize = 256;
/// Step halvings tried before an iteration is declared stalled.
const MAX_HALVINGS: usize = 40;
const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;

/// Least-squares map `M = Z_B·Z_A⁺` between paired encodings.
///
/// With `ridge = Some(λ)` the problem is regularized with `λ‖M‖²`, which
/// also covers rank-deficient `Z_A`.
pub fn fit_linear_map(z_a: &Tensor, z_b: &Tensor, ridge: Option<f64>) -> Result<Tensor> {
    let (&[d_a, n], &[d_b, n_b]) = (z_a.shape(), z_b.shape()) else {
        return Err(Error::shape("fit_linear_map", z_a.shape(), z_b.shape()));
    };
    if n != n_b {
        return Err(Error::shape("fit_linear_map", z_a.shape(), z_b.shape()));
    }
    let (za, zb) = (z_a.to_complex_vec(), z_b.to_complex_vec());
    // Solve Z_Aᵀ·Mᵀ ≈ Z_Bᵀ row by row over samples.
    let extra = if ridge.is_some() { d_a } else { 0 };
    let rows = n + extra;
    let mut a = vec![C64::new(0.0, 0.0); rows * d_a];
    let mut b = vec![C64::new(0.0, 0.0); rows * d_b];
    for s in 0..n {
        for i in 0..d_a {
            a[s * d_a + i] = za[i * n + s];
        }
        for j in 0..d_b {
            b[s * d_b + j] = zb[j * n + s];
        }
    }
    if let Some(l) = ridge {
        if !(l > 0.0) {
            return Err(Error::Config(format!("ridge must be positive, got {l}")));
        }
        for i in 0..d_a {
            a[(n + i) * d_a + i] = C64::new(l.sqrt(), 0.0);
        }
    }
    let x = complex_least_squares(&a, rows, d_a, &b, d_b)?;
    let mut m = vec![C64::new(0.0, 0.0); d_b * d_a];
    for i in 0..d_a {
        for j in 0..d_b {
            m[j * d_a + i] = x[i * d_b + j];
        }
    }
    Tensor::complex(&[d_b, d_a], m)
}

/// `k` indices spread evenly over `0..n`.
pub fn strided_indices(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| i * n / k.max(1)).collect()
}

/// Least-squares complex gain `⟨T, M⟩ / ‖T‖²`; zero when `T = 0`.
pub fn optimal_scale(t: &[C64], m: &[C64]) -> C64 {
    let tt: f64 = t.iter().map(|z| z.norm_sqr()).sum();
    if tt == 0.0 {
        return C64::new(0.0, 0.0);
    }
    t.iter().zip(m).map(|(a, b)| a.conj() * b).sum::<C64>() / tt
}

/// `‖β·T − M‖ / ‖M‖` at the optimal `β`; zero for `M = 0`.
pub fn relative_error(t: &[C64], m: &[C64]) -> f64 {
    let mm: f64 = m.iter().map(|z| z.norm_sqr()).sum();
    if mm == 0.0 {
        return 0.0;
    }
    let beta = optimal_scale(t, m);
    let r: f64 = t.iter().zip(m).map(|(a, b)| (beta * a - b).norm_sqr()).sum();
    (r / mm).sqrt()
}

/// Selection matrices feeding `d_in` evenly strided first-layer elements and
/// reading `d_out` evenly strided last-layer elements.
fn masks(stack: &SimStack, d_out: usize, d_in: usize) -> Result<(Tensor, Tensor)> {
    let (n_in, n_out) = (stack.first_len(), stack.last_len());
    if d_in > n_in || d_out > n_out {
        return Err(Error::Config(format!(
            "a {d_out}×{d_in} target needs at least {d_in} input and {d_out} output elements, stack has {n_in} and {n_out}"
        )));
    }
    let mut p_in = vec![C64::new(0.0, 0.0); n_in * d_in];
    for (c, r) in strided_indices(n_in, d_in).into_iter().enumerate() {
        p_in[r * d_in + c] = C64::new(1.0, 0.0);
    }
    let mut p_out = vec![C64::new(0.0, 0.0); d_out * n_out];
    for (r, c) in strided_indices(n_out, d_out).into_iter().enumerate() {
        p_out[r * n_out + c] = C64::new(1.0, 0.0);
    }
    Ok((Tensor::complex(&[d_out, n_out], p_out)?, Tensor::complex(&[n_in, d_in], p_in)?))
}

struct Masked {
    props: Vec<Tensor>,
    p_out: Tensor,
    p_in: Tensor,
}

impl Masked {
    fn new(stack: &SimStack, d_out: usize, d_in: usize) -> Result<Self> {
        let (p_out, p_in) = masks(stack, d_out, d_in)?;
        Ok(Masked { props: stack.propagation_matrices()?, p_out, p_in })
    }

    fn build(&self, tape: &mut Tape, phases: &[Var]) -> Result<Var> {
        let resp = phases.iter().map(|&p| tape.exp_j(p)).collect::<Result<Vec<_>>>()?;
        let props: Vec<Var> = self.props.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(self.p_in.clone());
        let t = sim_apply(tape, &resp, &props, x)?;
        let out = tape.constant(self.p_out.clone());
        tape.matmul(out, t)
    }

    fn eval(&self, phases: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = phases.iter().map(|p| tape.constant(p.clone())).collect();
        let t = self.build(&mut tape, &vars)?;
        Ok(tape.value(t).clone())
    }
}

/// Transfer matrix `[d_out, d_in]` between the strided input and output
/// elements at the stack's current phases.
pub fn masked_transfer(stack: &SimStack, d_out: usize, d_in: usize) -> Result<Tensor> {
    Masked::new(stack, d_out, d_in)?.eval(&stack.phase_tensors())
}

/// Haar-like random unitary `[n, n]`: Gram-Schmidt on a complex Gaussian
/// matrix.
pub fn random_unitary(n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let mut cols: Vec<Vec<C64>> = (0..n).map(|_| (0..n).map(|_| complex_gaussian(rng)).collect()).collect();
    for i in 0..n {
        for j in 0..i {
            let d: C64 = (0..n).map(|k| cols[j][k].conj() * cols[i][k]).sum();
            for k in 0..n {
                let v = cols[j][k];
                cols[i][k] -= d * v;
            }
        }
        let norm = cols[i].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        cols[i].iter_mut().for_each(|z| *z /= norm);
    }
    Tensor::complex(&[n, n], (0..n * n).map(|k| cols[k % n][k / n]).collect())
}

/// Draws every phase uniformly from `[-π, π)`.
pub fn randomize_phases(stack: &mut SimStack, rng: &mut impl Rng) {
    for layer in &mut stack.phases {
        for p in layer.iter_mut() {
            *p = rng.random_range(-PI..PI);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimApproximation {
    pub phases: Vec<Tensor>,
    pub beta: C64,
    pub error: f64,
    /// Relative error before the first step and after every step.
    pub history: Vec<f64>,
}

impl SimApproximation {
    /// The stack with the fitted phases installed.
    pub fn apply_to(&self, stack: &SimStack) -> Result<SimStack> {
        let mut s = stack.clone();
        s.set_phases(&self.phases)?;
        Ok(s)
    }
}

/// Fits the stack's phases so that `β·T` approximates `m` (`[d_out, d_in]`),
/// starting from the stack's current phases. Each step descends
/// `‖β·T − M‖²` with `β` held at its optimum, along the Adam-preconditioned
/// gradient (or the raw gradient when that stalls). Steps are halved until
/// the error does not grow, so the history is non-increasing. `lr` caps the
/// preconditioned step in radians.
pub fn sim_approximate(m: &Tensor, stack: &SimStack, iters: usize, lr: f64) -> Result<SimApproximation> {
    let &[d_out, d_in] = m.shape() else {
        return Err(Error::shape("sim_approximate", m.shape(), &[0, 0]));
    };
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    stack.validate()?;
    let target = m.to_complex_vec();
    let masked = Masked::new(stack, d_out, d_in)?;
    let mut phases = stack.phase_tensors();
    let m_norm: f64 = target.iter().map(|z| z.norm_sqr()).sum();
    let target_t = Tensor::complex(&[d_out, d_in], target.clone())?;

    let error_of = |ph: &[Tensor]| -> Result<(f64, C64)> {
        let t = masked.eval(ph)?.to_complex_vec();
        let e = relative_error(&t, &target);
        if !e.is_finite() {
            return Err(Error::Divergence(format!("approximation error became {e}")));
        }
        Ok((e, optimal_scale(&t, &target)))
    };
    let (mut error, mut beta) = error_of(&phases)?;
    let mut history = vec![error];
    if m_norm == 0.0 {
        return Ok(SimApproximation { phases, beta: C64::new(0.0, 0.0), error: 0.0, history });
    }

    let shapes: Vec<Vec<usize>> = phases.iter().map(|p| p.shape().to_vec()).collect();
    let unflatten = |v: &[f64]| -> Result<Vec<Tensor>> {
        let mut at = 0;
        shapes
            .iter()
            .map(|sh| {
                let n: usize = sh.iter().product();
                at += n;
                Tensor::real(sh, v[at - n..at].to_vec())
            })
            .collect()
    };
    let mut theta: Vec<f64> = phases.iter().flat_map(|p| p.as_real().expect("real phases").to_vec()).collect();
    let (mut m1, mut m2) = (vec![0.0; theta.len()], vec![0.0; theta.len()]);
    let (mut step, mut gstep) = (lr, lr);
    let mut adam_t = 0i32;
    for it in 0..iters {
        let mut tape = Tape::new();
        let vars: Vec<Var> = phases.iter().map(|p| tape.param(p.clone())).collect();
        let t = masked.build(&mut tape, &vars)?;
        let bt = tape.scale_complex(t, beta)?;
        let mv = tape.constant(target_t.clone());
        let r = tape.sub(bt, mv)?;
        let r2 = tape.abs2(r)?;
        let loss = tape.sum(r2)?;
        let value = tape.value(loss).item()? / m_norm;
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss became {value} at iteration {it}")));
        }
        let grads = tape.backward(loss)?;
        let mut g = Vec::with_capacity(theta.len());
        for (&v, sh) in vars.iter().zip(&shapes) {
            match grads.get(v) {
                Some(gv) => g.extend(gv.real_values("sim_approximate")?.iter().map(|x| x / m_norm)),
                None => g.extend(std::iter::repeat_n(0.0, sh.iter().product())),
            }
        }

        // Adam-preconditioned direction first, the raw gradient as fallback.
        adam_t += 1;
        let k = adam_t;
        let (c1, c2) = (1.0 - ADAM_B1.powi(k), 1.0 - ADAM_B2.powi(k));
        for ((a, b), gi) in m1.iter_mut().zip(m2.iter_mut()).zip(&g) {
            *a = ADAM_B1 * *a + (1.0 - ADAM_B1) * gi;
            *b = ADAM_B2 * *b + (1.0 - ADAM_B2) * gi * gi;
        }
        let adam: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| (a / c1) / ((b / c2).sqrt() + 1e-12)).collect();
        let mut accepted = false;
        for (dir, size, cap) in [(&adam, &mut step, lr), (&g, &mut gstep, f64::INFINITY)] {
            for _ in 0..MAX_HALVINGS {
                let trial: Vec<f64> = theta.iter().zip(dir.iter()).map(|(x, d)| x - *size * d).collect();
                let ph = unflatten(&trial)?;
                let (e, b) = error_of(&ph)?;
                if e < error {
                    theta = trial;
                    phases = ph;
                    error = e;
                    beta = b;
                    accepted = true;
                    *size = (*size * 1.5).min(cap);
                    break;
                }
                *size *= 0.5;
            }
            if accepted {
                break;
            }
            // The preconditioner went stale; restart it.
            m1.iter_mut().chain(m2.iter_mut()).for_each(|v| *v = 0.0);
            adam_t = 0;
            *size = lr;
        }
        history.push(error);
        if !accepted {
            break;
        }
    }
    Ok(SimApproximation { phases, beta, error, history })
}

/// How encodings of one link are carried to another link's decoder.
#[derive(Clone, Debug)]
pub enum AlignMap {
    /// Encodings passed on untouched.
    Identity,
    /// A digitally applied matrix `[d_B, d_A]`.
    Digital(Tensor),
    /// The masked stack transfer scaled by `beta` at the receiver.
    Sim { stack: SimStack, beta: C64 },
}

fn transmit(model: &MinnModel, tape: &mut Tape, vars: &[Var], x: &Tensor) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let s = model.encoder_forward(tape, vars, xv)?;
    let s = match model.cfg.power {
        PowerMode::HardNorm => tape.power_normalize(s, model.cfg.p_max)?,
        PowerMode::SoftPenalty => s,
    };
    let b = tape.shape(s)[0];
    let d = tape.value(s).len() / b.max(1);
    tape.reshape(s, &[b, d, 1])
}

/// Encoding matrix `[d, n]` of a model's transmitter over a dataset.
pub fn encodings(model: &MinnModel, data: &Dataset, exec: Execution) -> Result<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(BATCH).collect();
    let blocks = par::try_map_indexed(chunks.len(), exec, |k| {
        let (x, _) = data.batch(chunks[k]);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, false);
        let s = transmit(model, &mut tape, &vars, &x)?;
        Ok::<_, Error>(tape.value(s).to_complex_vec())
    })?;
    let n = data.len();
    let d = blocks.first().map_or(0, |b| b.len() / chunks[0].len());
    let mut z = vec![C64::new(0.0, 0.0); d * n];
    let mut s0 = 0;
    for (block, chunk) in blocks.iter().zip(&chunks) {
        for (j, col) in block.chunks(d).enumerate() {
            for (i, v) in col.iter().enumerate() {
                z[i * n + s0 + j] = *v;
            }
        }
        s0 += chunk.len();
    }
    Tensor::complex(&[d, n], z)
}

/// Accuracy of `decoder`'s receiver fed with `encoder`'s transmissions
/// through `map`. With `snr_db`, white noise at that SNR relative to the mean
/// mapped power per element is added before the receiver gain.
pub fn aligned_accuracy(
    encoder: &MinnModel,
    map: &AlignMap,
    decoder: &MinnModel,
    data: &Dataset,
    snr_db: Option<f64>,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let d_a = encoder.channel.n_tx * encoder.cfg.slots;
    let d_b = decoder.channel.n_tx * decoder.cfg.slots;
    let (matrix, gain) = match map {
        AlignMap::Identity if d_a == d_b => (None, C64::new(1.0, 0.0)),
        AlignMap::Identity => return Err(Error::shape("aligned_accuracy", &[d_a], &[d_b])),
        AlignMap::Digital(m) => (Some(m.to_complex()), C64::new(1.0, 0.0)),
        AlignMap::Sim { stack, beta } => (Some(masked_transfer(stack, d_b, d_a)?), *beta),
    };
    if let Some(m) = &matrix {
        if m.shape() != [d_b, d_a] {
            return Err(Error::shape("aligned_accuracy", m.shape(), &[d_b, d_a]));
        }
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(BATCH).collect();
    let correct = par::try_map_indexed(chunks.len(), exec, |k| {
        let (x, y) = data.batch(chunks[k]);
        let b = y.len();
        let mut tape = Tape::new();
        let va = encoder.params.bind(&mut tape, false);
        let vb = decoder.params.bind(&mut tape, false);
        let mut s = transmit(encoder, &mut tape, &va, &x)?;
        if let Some(m) = &matrix {
            let mv = tape.constant(m.clone());
            s = tape.matmul(mv, s)?;
        }
        if let Some(snr) = snr_db {
            let v = tape.value(s).to_complex_vec();
            let p = v.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64;
            let sd = noise_power(p, snr).sqrt();
            let mut rng = stream(seed, k as u64);
            let n: Vec<C64> = (0..v.len()).map(|_| complex_gaussian(&mut rng) * sd).collect();
            let nv = tape.constant(Tensor::complex(&[b, d_b, 1], n)?);
            s = tape.add(s, nv)?;
        }
        if gain != C64::new(1.0, 0.0) {
            s = tape.scale_complex(s, gain)?;
        }
        let s = tape.reshape(s, &[b, decoder.channel.n_tx, decoder.cfg.slots])?;
        let logits = decoder.decoder_forward(&mut tape, &vb, s)?;
        let l = tape.value(logits).real_values("aligned_accuracy")?;
        let c = decoder.classes();
        Ok::<_, Error>(y.iter().enumerate().filter(|(i, &t)| argmax(&l[i * c..][..c]) == t).count())
    })?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wave::SimSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn envelope_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut stack = SimSpec { layers: 3, rows: 3, cols: 3, ..SimSpec::default() }.build([0.0; 3], [0.0, 0.0, 1.0]).unwrap();
        randomize_phases(&mut stack, &mut rng);
        let target: Vec<C64> = (0..6).map(|_| complex_gaussian(&mut rng)).collect();
        let masked = Masked::new(&stack, 2, 3).unwrap();
        let phases = stack.phase_tensors();
        let sq = |ph: &[Tensor]| {
            let t = masked.eval(ph).unwrap().to_complex_vec();
            let e = relative_error(&t, &target);
            e * e * target.iter().map(|z| z.norm_sqr()).sum::<f64>()
        };
        let beta = optimal_scale(&masked.eval(&phases).unwrap().to_complex_vec(), &target);
        let mut tape = Tape::new();
        let vars: Vec<Var> = phases.iter().map(|p| tape.param(p.clone())).collect();
        let t = masked.build(&mut tape, &vars).unwrap();
        let bt = tape.scale_complex(t, beta).unwrap();
        let mv = tape.constant(Tensor::complex(&[2, 3], target.clone()).unwrap());
        let r = tape.sub(bt, mv).unwrap();
        let r2 = tape.abs2(r).unwrap();
        let loss = tape.sum(r2).unwrap();
        let grads = tape.backward(loss).unwrap();
        let h = 1e-6;
        for (l, &v) in vars.iter().enumerate() {
            let g = grads.get(v).unwrap().as_real().unwrap().to_vec();
            for i in 0..g.len() {
                let mut up = phases.clone();
                up[l].as_real_mut().unwrap()[i] += h;
                let mut dn = phases.clone();
                dn[l].as_real_mut().unwrap()[i] -= h;
                let fd = (sq(&up) - sq(&dn)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "layer {l} elem {i}: fd {fd} tape {}", g[i]);
            }
        }
    }
}
