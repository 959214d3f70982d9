//! The three-module network: a digital encoder at the transmitter, the
//! programmable channel (SIM, fading, noise) and a digital decoder at the
//! receiver, optionally with a controller that sets SIM phases from channel
//! observations.

use crate::channel::{complex_gaussian, noise_power, reference_power, ChannelConfig, ChannelRealization, ChannelSampler, CALIBRATION_SAMPLES};
use crate::error::{Error, Result};
use crate::params::{he_dense, gaussian, uniform, ParamSet};
use crate::tensor::{Tape, Tensor, Var, C64};
use crate::wave::{sim_apply, SimStack};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// How the transmit power budget is enforced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    /// Every transmitted block is rescaled to exactly `p_max`.
    HardNorm,
    /// No rescaling; power is traded against accuracy through the loss.
    SoftPenalty,
}

/// Which physical link sits between encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// TX → SIM → RX, plus the direct path when configured.
    Sim,
    /// Fading TX → RX link only, no metasurface.
    Direct,
    /// Encoder output fed straight to the decoder, no channel at all.
    Bypass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature maps of each conv stage (each stage: conv, ReLU, 2×2 pool).
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    /// Hidden dense widths after the conv stages.
    pub hidden: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            conv_channels: vec![8, 16],
            kernel: 5,
            hidden: vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub hidden: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinnConfig {
    pub link: Link,
    /// Channel uses per sample (columns of the transmitted block).
    pub slots: usize,
    pub power: PowerMode,
    pub p_max: f64,
    pub encoder: EncoderConfig,
    pub decoder_hidden: Vec<usize>,
    pub controller: Option<ControllerConfig>,
}

impl Default for MinnConfig {
    fn default() -> Self {
        MinnConfig {
            link: Link::Sim,
            slots: 1,
            power: PowerMode::HardNorm,
            p_max: 1.0,
            encoder: EncoderConfig::default(),
            decoder_hidden: vec![128, 64],
            controller: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Layout {
    conv: Vec<Dense>,
    encoder: Vec<Dense>,
    decoder: Vec<Dense>,
    phases: Vec<usize>,
    controller: Vec<Dense>,
}

/// Channel segments for one batch, either shared by all samples or stacked
/// along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBatch {
    pub h_tx_sim: Tensor,
    pub h_sim_rx: Tensor,
    pub h_direct: Option<Tensor>,
    pub noise_sigma2: Vec<f64>,
    /// `[g, obs_len]` flattened observations, `g` = 1 or batch size.
    pub observation: Tensor,
}

fn stack_tensors(ts: &[&Tensor]) -> Result<Tensor> {
    let shape0 = ts[0].shape().to_vec();
    let mut v = Vec::with_capacity(ts.len() * ts[0].len());
    for t in ts {
        if t.shape() != shape0.as_slice() {
            return Err(Error::shape("stack", &shape0, t.shape()));
        }
        v.extend(t.to_complex_vec());
    }
    let mut shape = vec![ts.len()];
    shape.extend(shape0);
    Tensor::complex(&shape, v)
}

impl ChannelBatch {
    pub fn shared(r: &ChannelRealization) -> Self {
        let obs = r.observation();
        ChannelBatch {
            h_tx_sim: r.h_tx_sim.clone(),
            h_sim_rx: r.h_sim_rx.clone(),
            h_direct: r.h_direct.clone(),
            noise_sigma2: vec![r.noise_sigma2],
            observation: Tensor::real(&[1, obs.len()], obs).expect("length matches"),
        }
    }

    pub fn stacked(rs: &[ChannelRealization]) -> Result<Self> {
        if rs.is_empty() {
            return Err(Error::Contract("empty realization batch".into()));
        }
        if rs.len() == 1 {
            return Ok(Self::shared(&rs[0]));
        }
        let tx: Vec<&Tensor> = rs.iter().map(|r| &r.h_tx_sim).collect();
        let rx: Vec<&Tensor> = rs.iter().map(|r| &r.h_sim_rx).collect();
        let direct = match rs[0].h_direct {
            Some(_) => {
                let d = rs
                    .iter()
                    .map(|r| r.h_direct.as_ref().ok_or_else(|| Error::Contract("mixed direct paths".into())))
                    .collect::<Result<Vec<_>>>()?;
                Some(stack_tensors(&d)?)
            }
            None => None,
        };
        let obs: Vec<Vec<f64>> = rs.iter().map(|r| r.observation()).collect();
        let len = obs[0].len();
        Ok(ChannelBatch {
            h_tx_sim: stack_tensors(&tx)?,
            h_sim_rx: stack_tensors(&rx)?,
            h_direct: direct,
            noise_sigma2: rs.iter().map(|r| r.noise_sigma2).collect(),
            observation: Tensor::real(&[rs.len(), len], obs.concat())?,
        })
    }
}

/// Receiver noise handling for one forward pass.
pub enum Noise<'a> {
    Off,
    /// Fresh CN(0, σ²) draws using each realization's noise level.
    Sample(&'a mut ChaCha8Rng),
    /// A fixed noise tensor shaped like the received block.
    Fixed(&'a Tensor),
}

/// Nodes of interest produced by [`MinnModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Transmitted block `[batch, n_tx, slots]` after power handling.
    pub signal: Var,
    /// Received block `[batch, n_rx, slots]` before the decoder.
    pub received: Var,
}

#[derive(Clone, Debug)]
pub struct MinnModel {
    pub cfg: MinnConfig,
    pub channel: ChannelConfig,
    pub stack: Option<SimStack>,
    pub params: ParamSet,
    input_shape: Vec<usize>,
    classes: usize,
    props: Vec<Tensor>,
    layout: Layout,
}

fn dense(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Dense {
    let w = params.push(format!("{name}.w"), he_dense(fan_in, fan_out, rng));
    let b = params.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    Dense { w, b }
}

impl MinnModel {
    /// Builds a model with freshly initialized parameters.
    pub fn new(
        cfg: MinnConfig,
        channel: ChannelConfig,
        stack: Option<SimStack>,
        input_shape: &[usize],
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        channel.validate()?;
        if cfg.slots == 0 || classes == 0 {
            return Err(Error::Config("slots and classes must be positive".into()));
        }
        if !(cfg.p_max > 0.0) {
            return Err(Error::Config(format!("p_max must be positive, got {}", cfg.p_max)));
        }
        let stack = match cfg.link {
            Link::Sim => {
                let s = stack.ok_or_else(|| Error::Config("a SIM link needs a stack".into()))?;
                s.validate()?;
                Some(s)
            }
            _ => None,
        };
        let mut params = ParamSet::new();
        let mut layout = Layout::default();
        let n_out = 2 * channel.n_tx * cfg.slots;

        let mut flat = match (input_shape, cfg.encoder.conv_channels.is_empty()) {
            (&[c, h, w], false) => {
                let (mut c, mut h, mut w) = (c, h, w);
                let k = cfg.encoder.kernel;
                for (i, &out) in cfg.encoder.conv_channels.iter().enumerate() {
                    if h < k || w < k {
                        return Err(Error::Config(format!("conv stage {i}: {h}×{w} input smaller than kernel {k}")));
                    }
                    let fan_in = c * k * k;
                    let wi = params.push(format!("enc.conv{i}.w"), gaussian(&[out, c, k, k], (2.0 / fan_in as f64).sqrt(), rng));
                    let bi = params.push(format!("enc.conv{i}.b"), Tensor::zeros(&[out]));
                    layout.conv.push(Dense { w: wi, b: bi });
                    c = out;
                    h = (h - k + 1) / 2;
                    w = (w - k + 1) / 2;
                }
                c * h * w
            }
            (shape, true) => shape.iter().product(),
            (shape, false) => {
                return Err(Error::Config(format!("conv encoder needs [c, h, w] inputs, got {shape:?}")));
            }
        };
        for (i, &h) in cfg.encoder.hidden.iter().enumerate() {
            layout.encoder.push(dense(&mut params, &format!("enc.fc{i}"), flat, h, rng));
            flat = h;
        }
        layout.encoder.push(dense(&mut params, "enc.out", flat, n_out, rng));

        if let Some(s) = &stack {
            match &cfg.controller {
                None => {
                    for (k, g) in s.layers.iter().enumerate() {
                        layout.phases.push(params.push(format!("sim.phase{k}"), uniform(&[g.len()], -PI, PI, rng)));
                    }
                }
                Some(c) => {
                    let obs = Self::observation_len(&channel, s);
                    let total = s.total_phases();
                    layout.controller.push(dense(&mut params, "ctrl.fc0", obs, c.hidden, rng));
                    let w = params.push("ctrl.out.w", gaussian(&[c.hidden, total], 0.1 / (c.hidden as f64).sqrt(), rng));
                    let b = params.push("ctrl.out.b", uniform(&[total], -PI, PI, rng));
                    layout.controller.push(Dense { w, b });
                }
            }
        }

        let ants = if cfg.link == Link::Bypass { channel.n_tx } else { channel.n_rx };
        let mut width = 2 * ants * cfg.slots;
        for (i, &h) in cfg.decoder_hidden.iter().enumerate() {
            layout.decoder.push(dense(&mut params, &format!("dec.fc{i}"), width, h, rng));
            width = h;
        }
        layout.decoder.push(dense(&mut params, "dec.out", width, classes, rng));

        let props = match &stack {
            Some(s) => s.propagation_matrices()?,
            None => vec![],
        };
        Ok(MinnModel {
            cfg,
            channel,
            stack,
            params,
            input_shape: input_shape.to_vec(),
            classes,
            props,
            layout,
        })
    }

    fn observation_len(ch: &ChannelConfig, s: &SimStack) -> usize {
        let direct = if ch.include_direct_path { ch.n_rx * ch.n_tx } else { 0 };
        2 * (s.first_len() * ch.n_tx + ch.n_rx * s.last_len() + direct)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn propagation_matrices(&self) -> &[Tensor] {
        &self.props
    }

    /// Indices of the static SIM phase parameters (empty with a controller).
    pub fn phase_params(&self) -> &[usize] {
        &self.layout.phases
    }

    /// Copies the current static phases into the stack description.
    pub fn sync_stack(&mut self) -> Result<()> {
        if let Some(s) = &mut self.stack {
            if !self.layout.phases.is_empty() {
                let ph: Vec<Tensor> = self.layout.phases.iter().map(|&i| self.params.get(i).clone()).collect();
                s.set_phases(&ph)?;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::shape("encoder input", s, &self.input_shape));
        }
        Ok(s[0])
    }

    /// Digital encoder: features `[batch, ...]` to a complex block `[batch, n_tx, slots]`.
    pub fn encoder_forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let mut h = x;
        for l in &self.layout.conv {
            h = tape.conv2d(h, vars[l.w], vars[l.b])?;
            h = tape.relu(h)?;
            h = tape.max_pool2(h)?;
        }
        let flat = tape.value(h).len() / b.max(1);
        h = tape.reshape(h, &[b, flat])?;
        let last = self.layout.encoder.len() - 1;
        for (i, l) in self.layout.encoder.iter().enumerate() {
            h = tape.linear(h, vars[l.w], vars[l.b])?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        let z = tape.pairs_to_complex(h)?;
        tape.reshape(z, &[b, self.channel.n_tx, self.cfg.slots])
    }

    /// Digital decoder on the received block `[batch, ants, slots]`.
    pub fn decoder_forward(&self, tape: &mut Tape, vars: &[Var], y: Var) -> Result<Var> {
        let mut h = tape.complex_to_pairs(y)?;
        let last = self.layout.decoder.len() - 1;
        for (i, l) in self.layout.decoder.iter().enumerate() {
            h = tape.linear(h, vars[l.w], vars[l.b])?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Controller: observations `[g, obs_len]` to all phases `[g, total]`.
    pub fn controller_forward(&self, tape: &mut Tape, vars: &[Var], obs: Var) -> Result<Var> {
        if self.layout.controller.is_empty() {
            return Err(Error::State("model has no phase controller".into()));
        }
        let mut h = obs;
        let last = self.layout.controller.len() - 1;
        for (i, l) in self.layout.controller.iter().enumerate() {
            h = tape.linear(h, vars[l.w], vars[l.b])?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Unit-modulus responses per layer, `[N_k]` (static) or `[g, N_k]`.
    fn responses(&self, tape: &mut Tape, vars: &[Var], ch: &ChannelBatch) -> Result<Vec<Var>> {
        let stack = self.stack.as_ref().expect("SIM link");
        if self.layout.controller.is_empty() {
            return self.layout.phases.iter().map(|&i| tape.exp_j(vars[i])).collect();
        }
        let obs = tape.constant(ch.observation.clone());
        let theta = self.controller_forward(tape, vars, obs)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(stack.layers.len());
        for g in &stack.layers {
            let t = tape.slice_cols(theta, start, g.len())?;
            out.push(tape.exp_j(t)?);
            start += g.len();
        }
        Ok(out)
    }

    /// Effective channel node `[n_rx, n_tx]` or `[batch, n_rx, n_tx]`.
    pub fn effective_channel(&self, tape: &mut Tape, vars: &[Var], ch: &ChannelBatch) -> Result<Var> {
        match self.cfg.link {
            Link::Bypass => Err(Error::Contract("bypass link has no channel".into())),
            Link::Direct => {
                let d = ch.h_direct.as_ref().ok_or_else(|| Error::Contract("direct link without direct channel".into()))?;
                Ok(tape.constant(d.clone()))
            }
            Link::Sim => {
                let resp = self.responses(tape, vars, ch)?;
                let props: Vec<Var> = self.props.iter().map(|p| tape.constant(p.clone())).collect();
                let x0 = tape.constant(ch.h_tx_sim.clone());
                let t = sim_apply(tape, &resp, &props, x0)?;
                let rx = tape.constant(ch.h_sim_rx.clone());
                let h = tape.matmul(rx, t)?;
                match &ch.h_direct {
                    None => Ok(h),
                    Some(d) => {
                        let d = tape.constant(d.clone());
                        if tape.shape(d) == tape.shape(h) {
                            tape.add(h, d)
                        } else {
                            Err(Error::shape("effective_channel", tape.shape(h), tape.shape(d)))
                        }
                    }
                }
            }
        }
    }

    /// Full differentiable pass. `ch` may be `None` only for the bypass link.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: &Tensor, ch: Option<&ChannelBatch>, noise: Noise) -> Result<Forward> {
        let b = self.check_input(x)?;
        let xv = tape.constant(x.clone());
        let s = self.encoder_forward(tape, vars, xv)?;
        let s = match self.cfg.power {
            PowerMode::HardNorm => tape.power_normalize(s, self.cfg.p_max)?,
            PowerMode::SoftPenalty => s,
        };
        let y = match self.cfg.link {
            Link::Bypass => s,
            _ => {
                let ch = ch.ok_or_else(|| Error::Contract("channel batch required".into()))?;
                let h = self.effective_channel(tape, vars, ch)?;
                let y = tape.matmul(h, s)?;
                let shape = tape.shape(y).to_vec();
                let n = match noise {
                    Noise::Off => None,
                    Noise::Fixed(t) => Some(t.clone()),
                    Noise::Sample(rng) => {
                        let per = shape[1..].iter().product::<usize>();
                        let mut v = Vec::with_capacity(b * per);
                        for i in 0..b {
                            let sd = ch.noise_sigma2[i % ch.noise_sigma2.len()].sqrt();
                            v.extend((0..per).map(|_| complex_gaussian(rng) * sd));
                        }
                        Some(Tensor::complex(&shape, v)?)
                    }
                };
                match n {
                    None => y,
                    Some(n) => {
                        if n.shape() != shape.as_slice() {
                            return Err(Error::shape("noise", n.shape(), &shape));
                        }
                        let nv = tape.constant(n);
                        tape.add(y, nv)?
                    }
                }
            }
        };
        let logits = self.decoder_forward(tape, vars, y)?;
        Ok(Forward { logits, signal: s, received: y })
    }

    /// Effective channels for one realization at random SIM phases.
    fn random_phase_channel(&self, r: &ChannelRealization, rng: &mut impl Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ch = ChannelBatch::shared(r);
        match self.cfg.link {
            Link::Direct => Ok(ch.h_direct.clone().ok_or_else(|| Error::Contract("direct channel missing".into()))?),
            Link::Bypass => Err(Error::Contract("bypass link has no channel".into())),
            Link::Sim => {
                let stack = self.stack.as_ref().expect("SIM link");
                let resp = stack
                    .layers
                    .iter()
                    .map(|g| {
                        let p = tape.constant(uniform(&[g.len()], -PI, PI, rng));
                        tape.exp_j(p)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let props: Vec<Var> = self.props.iter().map(|p| tape.constant(p.clone())).collect();
                let x0 = tape.constant(ch.h_tx_sim.clone());
                let t = sim_apply(&mut tape, &resp, &props, x0)?;
                let rx = tape.constant(ch.h_sim_rx.clone());
                let mut h = tape.matmul(rx, t)?;
                if let Some(d) = &ch.h_direct {
                    let d = tape.constant(d.clone());
                    h = tape.add(h, d)?;
                }
                Ok(tape.value(h).clone())
            }
        }
    }

    /// Sets the sampler's noise level for the configured SNR. The reference
    /// is the mean received power per antenna over a calibration batch of
    /// random unit-power blocks (scaled to `p_max`) sent through an
    /// unconfigured link: random SIM phases, channels from `pinned` or fresh
    /// draws. Returns the reference power.
    pub fn calibrate_noise(
        &self,
        sampler: &mut ChannelSampler,
        pinned: Option<&ChannelRealization>,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if self.cfg.link == Link::Bypass {
            sampler.set_noise_sigma2(0.0);
            return Ok(0.0);
        }
        let mut channels = Vec::with_capacity(CALIBRATION_SAMPLES);
        for _ in 0..CALIBRATION_SAMPLES {
            let r = match pinned {
                Some(r) => r.clone(),
                None => self.draw(sampler, rng)?,
            };
            channels.push(self.random_phase_channel(&r, rng)?);
        }
        let ref_p = reference_power(&channels, self.cfg.p_max, CALIBRATION_SAMPLES, rng)?;
        if !(ref_p > 0.0) {
            return Err(Error::Data("calibration batch received no power".into()));
        }
        sampler.set_noise_sigma2(noise_power(ref_p, self.channel.snr_db));
        Ok(ref_p)
    }

    /// Draws a realization suited to this model's link.
    pub fn draw(&self, sampler: &mut ChannelSampler, rng: &mut ChaCha8Rng) -> Result<ChannelRealization> {
        match self.cfg.link {
            Link::Direct => sampler.sample_direct(rng),
            _ => sampler.sample(rng),
        }
    }

    /// Sampler matching this model's geometry.
    pub fn sampler(&self) -> Result<ChannelSampler> {
        ChannelSampler::new(&self.channel, self.stack.as_ref())
    }
}

/// Rescales a block to energy `p_max`; zero blocks pass through.
pub fn power_normalize(s: &[C64], p_max: f64) -> Result<Vec<C64>> {
    if !(p_max > 0.0) {
        return Err(Error::Config(format!("power budget must be positive, got {p_max}")));
    }
    let e: f64 = s.iter().map(|z| z.norm_sqr()).sum();
    if e == 0.0 {
        return Ok(s.to_vec());
    }
    let g = (p_max / e).sqrt();
    Ok(s.iter().map(|z| z * g).collect())
}

/// Logits for one batch with live noise and no gradient tracking.
pub fn minn_forward(x: &Tensor, model: &MinnModel, realization: Option<&ChannelRealization>, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let ch = realization.map(ChannelBatch::shared);
    let f = model.forward(&mut tape, &vars, x, ch.as_ref(), Noise::Sample(rng))?;
    Ok(tape.value(f.logits).clone())
}

/// Per-sample energy of a `[batch, ...]` block.
pub fn block_power(signal: &Tensor) -> Vec<f64> {
    let b = signal.shape().first().copied().unwrap_or(1).max(1);
    let z = signal.to_complex_vec();
    let per = z.len() / b;
    z.chunks(per.max(1)).map(|c| c.iter().map(|v| v.norm_sqr()).sum()).collect()
}
