//! Fading channels around a stacked metasurface, and receiver noise.
//!
//! A realization holds three segments: TX antennas to the first SIM layer,
//! last SIM layer to RX antennas, and an optional direct TX→RX link. The
//! effective channel is `H_eff = H_sim_rx·T_sim·H_tx_sim (+ H_direct)`.

use crate::error::{Error, Result};
use crate::tensor::{complex_matmul, Tensor, C64};
use crate::wave::{propagation_matrix, ElementGrid, SimStack};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingModel {
    Geometric,
    Rayleigh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub model: FadingModel,
    pub n_tx: usize,
    pub n_rx: usize,
    /// Scattering paths per segment (geometric model only).
    pub n_scatterers: usize,
    /// Position of the SIM along the TX→RX axis, as a fraction of the link.
    pub sim_placement: f64,
    pub include_direct_path: bool,
    /// Per-antenna receive SNR in dB; `inf` disables noise.
    pub snr_db: f64,
    pub seed: u64,
    /// TX→RX separation in meters.
    pub link_distance: f64,
    /// Power ratio of the line-of-sight part of the TX→SIM segment to its
    /// scattered part (geometric model only).
    pub los_k_factor: f64,
    /// Redraw the SIM→RX and direct segments for every sample while the
    /// TX→SIM segment stays fixed, emulating a receiver that moves.
    pub rx_mobility: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            model: FadingModel::Geometric,
            n_tx: 4,
            n_rx: 4,
            n_scatterers: 10,
            sim_placement: 0.075,
            include_direct_path: false,
            snr_db: 10.0,
            seed: 0,
            link_distance: 1.0,
            los_k_factor: 10.0,
            rx_mobility: false,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_rx == 0 {
            return Err(Error::Config(format!("antenna counts must be positive ({}×{})", self.n_rx, self.n_tx)));
        }
        if self.model == FadingModel::Geometric && self.n_scatterers == 0 {
            return Err(Error::Config("geometric channel needs at least one scatterer".into()));
        }
        if !(self.sim_placement > 0.0 && self.sim_placement < 1.0) {
            return Err(Error::Config(format!("sim_placement {} outside (0, 1)", self.sim_placement)));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("snr_db must be finite or +inf, got {}", self.snr_db)));
        }
        if !(self.link_distance > 0.0) || !(self.los_k_factor >= 0.0) {
            return Err(Error::Config("link_distance must be positive and los_k_factor non-negative".into()));
        }
        Ok(())
    }
}

/// Sampled channel segments plus the noise level for this link.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub h_tx_sim: Tensor,
    pub h_sim_rx: Tensor,
    pub h_direct: Option<Tensor>,
    pub noise_sigma2: f64,
}

impl ChannelRealization {
    pub fn validate(&self) -> Result<()> {
        let finite = self.h_tx_sim.is_finite()
            && self.h_sim_rx.is_finite()
            && self.h_direct.as_ref().is_none_or(|h| h.is_finite());
        if !finite {
            return Err(Error::Data("channel realization has non-finite entries".into()));
        }
        if !(self.noise_sigma2 >= 0.0) {
            return Err(Error::Data(format!("noise power {} is negative", self.noise_sigma2)));
        }
        Ok(())
    }

    /// Real/imaginary parts of every segment, flattened in a fixed order.
    pub fn observation(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let segments = [Some(&self.h_tx_sim), Some(&self.h_sim_rx), self.h_direct.as_ref()];
        for h in segments.into_iter().flatten() {
            let z = h.to_complex_vec();
            out.extend(z.iter().map(|c| c.re));
            out.extend(z.iter().map(|c| c.im));
        }
        out
    }
}

/// Antenna or element arrangement used for steering vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Array {
    /// Half-wavelength uniform linear array.
    Ula(usize),
    /// Half-wavelength uniform planar array, row-major.
    Upa { rows: usize, cols: usize },
}

impl Array {
    pub fn len(&self) -> usize {
        match *self {
            Array::Ula(n) => n,
            Array::Upa { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unit-norm steering vector. A ULA uses the first angle; a UPA uses
    /// the first along columns and the second along rows.
    pub fn steering(&self, angles: (f64, f64)) -> Vec<C64> {
        let ula = |n: usize, a: f64| -> Vec<C64> {
            let s = 1.0 / (n as f64).sqrt();
            (0..n).map(|k| C64::from_polar(s, PI * k as f64 * a.sin())).collect()
        };
        match *self {
            Array::Ula(n) => ula(n, angles.0),
            Array::Upa { rows, cols } => {
                let ac = ula(cols, angles.0);
                let ar = ula(rows, angles.1);
                ar.iter().flat_map(|r| ac.iter().map(move |c| r * c)).collect()
            }
        }
    }
}

/// One scattering path of a geometric channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Path {
    pub gain: C64,
    pub rx_angles: (f64, f64),
    pub tx_angles: (f64, f64),
}

/// `sqrt(n_rx·n_tx/L)·Σ α_l·a_rx·a_txᴴ` for explicit paths.
pub fn geometric_from_paths(rx: Array, tx: Array, paths: &[Path]) -> Result<Tensor> {
    if paths.is_empty() {
        return Err(Error::Config("geometric channel needs at least one path".into()));
    }
    let (nr, nt) = (rx.len(), tx.len());
    if nr == 0 || nt == 0 {
        return Err(Error::Config("array sizes must be positive".into()));
    }
    let scale = ((nr * nt) as f64 / paths.len() as f64).sqrt();
    let mut h = vec![C64::new(0.0, 0.0); nr * nt];
    for p in paths {
        let ar = rx.steering(p.rx_angles);
        let at = tx.steering(p.tx_angles);
        for (i, a) in ar.iter().enumerate() {
            let ga = p.gain * a * scale;
            for (j, b) in at.iter().enumerate() {
                h[i * nt + j] += ga * b.conj();
            }
        }
    }
    Tensor::complex(&[nr, nt], h)
}

pub fn complex_gaussian(rng: &mut impl Rng) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn angle(rng: &mut impl Rng) -> f64 {
    rng.random_range(-PI / 2.0..PI / 2.0)
}

/// Geometric channel between arbitrary arrays with `n_scatterers` random paths.
pub fn geometric_channel_arrays(rx: Array, tx: Array, n_scatterers: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if n_scatterers == 0 {
        return Err(Error::Config("geometric channel needs at least one scatterer".into()));
    }
    let paths: Vec<Path> = (0..n_scatterers)
        .map(|_| Path {
            gain: complex_gaussian(rng),
            rx_angles: (angle(rng), angle(rng)),
            tx_angles: (angle(rng), angle(rng)),
        })
        .collect();
    geometric_from_paths(rx, tx, &paths)
}

/// Geometric channel between two half-wavelength ULAs.
pub fn geometric_channel(n_rx: usize, n_tx: usize, n_scatterers: usize, rng: &mut impl Rng) -> Result<Tensor> {
    geometric_channel_arrays(Array::Ula(n_rx), Array::Ula(n_tx), n_scatterers, rng)
}

/// I.i.d. CN(0, 1) entries.
pub fn rayleigh_channel(n_rx: usize, n_tx: usize, rng: &mut impl Rng) -> Tensor {
    let v = (0..n_rx * n_tx).map(|_| complex_gaussian(rng)).collect();
    Tensor::complex(&[n_rx, n_tx], v).expect("length matches")
}

/// `H_sim_rx·T_sim·H_tx_sim + H_direct`.
pub fn end_to_end_response(real: &ChannelRealization, t_sim: &Tensor) -> Result<Tensor> {
    let inner = complex_matmul(t_sim, &real.h_tx_sim)?;
    let h = complex_matmul(&real.h_sim_rx, &inner)?;
    match &real.h_direct {
        None => Ok(h),
        Some(d) => {
            if d.shape() != h.shape() {
                return Err(Error::shape("end_to_end_response", d.shape(), h.shape()));
            }
            let v = h.to_complex_vec().iter().zip(d.to_complex_vec()).map(|(a, b)| a + b).collect();
            Tensor::complex(h.shape(), v)
        }
    }
}

/// Noise power for a target per-antenna SNR; zero when `snr_db` is `+inf`.
pub fn noise_power(ref_power: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        ref_power * 10f64.powf(-snr_db / 10.0)
    }
}

/// I.i.d. CN(0, σ²) samples with the given shape.
pub fn noise(shape: &[usize], sigma2: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let s = sigma2.sqrt();
    let v = (0..n)
        .map(|_| if s > 0.0 { complex_gaussian(rng) * s } else { C64::new(0.0, 0.0) })
        .collect();
    Tensor::complex(shape, v).expect("length matches")
}

/// `y + n` with `n ~ CN(0, ref_power·10^(−snr_db/10))`.
pub fn awgn(y: &Tensor, snr_db: f64, ref_power: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(ref_power > 0.0) {
        return Err(Error::Config(format!("reference power must be positive, got {ref_power}")));
    }
    let sigma2 = noise_power(ref_power, snr_db);
    if sigma2 == 0.0 {
        return Ok(y.clone());
    }
    let n = noise(y.shape(), sigma2, rng);
    let v = y
        .to_complex_vec()
        .iter()
        .zip(n.as_complex().expect("complex noise"))
        .map(|(a, b)| a + b)
        .collect();
    Tensor::complex(y.shape(), v)
}

pub const CALIBRATION_SAMPLES: usize = 256;

/// Mean of `‖H·s‖²/n_rx` over random signals with `‖s‖² = p_tx`, cycling
/// through the given effective channels.
pub fn reference_power(channels: &[Tensor], p_tx: f64, samples: usize, rng: &mut impl Rng) -> Result<f64> {
    if channels.is_empty() || samples == 0 {
        return Err(Error::Config("calibration needs at least one channel and one sample".into()));
    }
    let mut total = 0.0;
    for k in 0..samples {
        let h = &channels[k % channels.len()];
        let [n_rx, n_tx] = *h.shape() else {
            return Err(Error::shape("reference_power", h.shape(), &[]));
        };
        let mut s: Vec<C64> = (0..n_tx).map(|_| complex_gaussian(rng)).collect();
        let e: f64 = s.iter().map(|z| z.norm_sqr()).sum();
        let g = (p_tx / e.max(1e-300)).sqrt();
        s.iter_mut().for_each(|z| *z *= g);
        let hv = h.to_complex_vec();
        let mut p = 0.0;
        for i in 0..n_rx {
            let yi: C64 = (0..n_tx).map(|j| hv[i * n_tx + j] * s[j]).sum();
            p += yi.norm_sqr();
        }
        total += p / n_rx as f64;
    }
    Ok(total / samples as f64)
}

/// Dimensions of the SIM faces a realization must connect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimFaces {
    pub first: Array,
    pub last: Array,
}

impl SimFaces {
    pub fn of(stack: &SimStack) -> Self {
        let f = &stack.layers[0];
        let l = &stack.layers[stack.layers.len() - 1];
        SimFaces {
            first: Array::Upa { rows: f.rows, cols: f.cols },
            last: Array::Upa { rows: l.rows, cols: l.cols },
        }
    }

    /// Placeholder faces for links without a SIM: the segments become
    /// identities and only the direct path is meaningful.
    pub fn transparent(n_tx: usize, n_rx: usize) -> Self {
        SimFaces {
            first: Array::Ula(n_tx),
            last: Array::Ula(n_rx),
        }
    }
}

/// Draws realizations for a fixed link geometry.
#[derive(Clone, Debug)]
pub struct ChannelSampler {
    cfg: ChannelConfig,
    faces: SimFaces,
    /// Unit-power line-of-sight coupling from the TX array to the first SIM
    /// layer, scaled to `E‖H‖² = rows·cols`.
    los: Option<Tensor>,
    pinned_tx: Option<Tensor>,
    noise_sigma2: f64,
}

impl ChannelSampler {
    pub fn new(cfg: &ChannelConfig, stack: Option<&SimStack>) -> Result<Self> {
        cfg.validate()?;
        let faces = match stack {
            Some(s) => SimFaces::of(s),
            None => SimFaces::transparent(cfg.n_tx, cfg.n_rx),
        };
        let los = match (stack, cfg.model) {
            (Some(s), FadingModel::Geometric) if cfg.los_k_factor > 0.0 => Some(line_of_sight(cfg, s)?),
            _ => None,
        };
        Ok(ChannelSampler {
            cfg: cfg.clone(),
            faces,
            los,
            pinned_tx: None,
            noise_sigma2: 0.0,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn faces(&self) -> SimFaces {
        self.faces
    }

    pub fn noise_sigma2(&self) -> f64 {
        self.noise_sigma2
    }

    /// Sets the noise level carried by subsequently drawn realizations.
    pub fn set_noise_sigma2(&mut self, sigma2: f64) {
        self.noise_sigma2 = sigma2;
    }

    fn segment(&self, rx: Array, tx: Array, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        match self.cfg.model {
            FadingModel::Rayleigh => Ok(rayleigh_channel(rx.len(), tx.len(), rng)),
            FadingModel::Geometric => geometric_channel_arrays(rx, tx, self.cfg.n_scatterers, rng),
        }
    }

    fn tx_segment(&self, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let tx = Array::Ula(self.cfg.n_tx);
        let scatter = self.segment(self.faces.first, tx, rng)?;
        let Some(los) = &self.los else { return Ok(scatter) };
        let k = self.cfg.los_k_factor;
        let (a, b) = ((k / (k + 1.0)).sqrt(), (1.0 / (k + 1.0)).sqrt());
        let v = los
            .to_complex_vec()
            .iter()
            .zip(scatter.to_complex_vec())
            .map(|(l, s)| l * a + s * b)
            .collect();
        Tensor::complex(scatter.shape(), v)
    }

    /// Draws a realization. With `rx_mobility` the TX→SIM segment is drawn
    /// once and reused.
    pub fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<ChannelRealization> {
        let h_tx_sim = match (&self.pinned_tx, self.cfg.rx_mobility) {
            (Some(h), true) => h.clone(),
            _ => {
                let h = self.tx_segment(rng)?;
                if self.cfg.rx_mobility {
                    self.pinned_tx = Some(h.clone());
                }
                h
            }
        };
        let h_sim_rx = self.segment(Array::Ula(self.cfg.n_rx), self.faces.last, rng)?;
        let h_direct = if self.cfg.include_direct_path {
            Some(self.segment(Array::Ula(self.cfg.n_rx), Array::Ula(self.cfg.n_tx), rng)?)
        } else {
            None
        };
        Ok(ChannelRealization {
            h_tx_sim,
            h_sim_rx,
            h_direct,
            noise_sigma2: self.noise_sigma2,
        })
    }

    /// Draws a direct-only realization for links without a SIM: identity
    /// segments and a fresh direct channel.
    pub fn sample_direct(&mut self, rng: &mut ChaCha8Rng) -> Result<ChannelRealization> {
        let h = self.segment(Array::Ula(self.cfg.n_rx), Array::Ula(self.cfg.n_tx), rng)?;
        Ok(ChannelRealization {
            h_tx_sim: Tensor::eye_complex(self.cfg.n_tx),
            h_sim_rx: Tensor::zeros_complex(&[self.cfg.n_rx, self.cfg.n_tx]),
            h_direct: Some(h),
            noise_sigma2: self.noise_sigma2,
        })
    }
}

/// Near-field coupling from a half-wavelength TX ULA at the origin to the
/// first SIM layer, normalized to `‖H‖²_F = N_1·n_tx`.
fn line_of_sight(cfg: &ChannelConfig, stack: &SimStack) -> Result<Tensor> {
    let lambda = stack.wavelength;
    let first = &stack.layers[0];
    let mut tx = ElementGrid::new(1, cfg.n_tx, lambda / 2.0, [0.0; 3], [0.0, 0.0, 1.0])?;
    // Place the SIM face at the configured fraction of the link.
    let mut face = first.clone();
    face.origin = [0.0, 0.0, cfg.sim_placement * cfg.link_distance];
    face.normal = [0.0, 0.0, 1.0];
    tx.element_area = tx.pitch * tx.pitch;
    let h = propagation_matrix(&tx, &face, lambda)?;
    let e = h.norm_sqr();
    if !(e > 0.0) {
        return Err(Error::Geometry("TX array does not illuminate the SIM".into()));
    }
    let g = ((face.len() * cfg.n_tx) as f64 / e).sqrt();
    let v = h.to_complex_vec().iter().map(|z| z * g).collect();
    Tensor::complex(h.shape(), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn config_validation() {
        let mut c = ChannelConfig::default();
        assert!(c.validate().is_ok());
        c.sim_placement = 1.0;
        assert!(c.validate().is_err());
        c = ChannelConfig { n_scatterers: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c = ChannelConfig { snr_db: f64::NAN, ..Default::default() };
        assert!(c.validate().is_err());
        c = ChannelConfig { snr_db: f64::INFINITY, ..Default::default() };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn upa_steering_is_unit_norm() {
        let a = Array::Upa { rows: 3, cols: 5 }.steering((0.3, -0.7));
        let n: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mobility_pins_tx_segment() {
        let cfg = ChannelConfig { rx_mobility: true, model: FadingModel::Rayleigh, ..Default::default() };
        let mut s = ChannelSampler::new(&cfg, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = s.sample(&mut rng).unwrap();
        let b = s.sample(&mut rng).unwrap();
        assert_eq!(a.h_tx_sim, b.h_tx_sim);
        assert_ne!(a.h_sim_rx, b.h_sim_rx);
    }
}
