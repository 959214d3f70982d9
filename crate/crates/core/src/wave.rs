//! Diffractive propagation inside a stacked intelligent metasurface (SIM).
//!
//! Each layer is a planar grid of phase-only elements. Between consecutive
//! layers every element couples to every element of the next layer through a
//! Rayleigh–Sommerfeld coefficient, so the whole stack realizes
//! `T = Φ_K·P_{K−1→K}·…·P_{1→2}·Φ_1` with `Φ_k = diag(e^{jθ_k})`.

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::{Tape, Tensor, Var, C64};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const DEFAULT_CARRIER_HZ: f64 = 28e9;

pub type Point = [f64; 3];

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn scaled(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Planar grid of metasurface elements (or antennas).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementGrid {
    pub rows: usize,
    pub cols: usize,
    /// Center-to-center spacing in meters.
    pub pitch: f64,
    /// Effective element area in m².
    pub element_area: f64,
    pub origin: Point,
    /// Unit normal of the grid plane (direction of propagation).
    pub normal: Point,
}

impl ElementGrid {
    pub fn new(rows: usize, cols: usize, pitch: f64, origin: Point, normal: Point) -> Result<Self> {
        let g = ElementGrid {
            rows,
            cols,
            pitch,
            element_area: pitch * pitch,
            origin,
            normal,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Geometry(format!("empty grid {}×{}", self.rows, self.cols)));
        }
        if !(self.pitch > 0.0) {
            return Err(Error::Geometry(format!("pitch must be positive, got {}", self.pitch)));
        }
        if !(self.element_area > 0.0) || self.element_area > self.pitch * self.pitch * (1.0 + 1e-12) {
            return Err(Error::Geometry(format!(
                "element area {} must lie in (0, pitch²]",
                self.element_area
            )));
        }
        if (norm(self.normal) - 1.0).abs() > 1e-9 {
            return Err(Error::Geometry(format!("normal {:?} is not a unit vector", self.normal)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// In-plane unit axes `(u, v)` along columns and rows.
    fn axes(&self) -> (Point, Point) {
        let n = self.normal;
        let helper = if n[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
        let u = cross(helper, n);
        let u = scaled(u, 1.0 / norm(u));
        let v = cross(n, u);
        (u, v)
    }

    /// Element centers in row-major order.
    pub fn positions(&self) -> Vec<Point> {
        let (u, v) = self.axes();
        let cr = (self.rows as f64 - 1.0) / 2.0;
        let cc = (self.cols as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(self.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                let du = (c as f64 - cc) * self.pitch;
                let dv = (r as f64 - cr) * self.pitch;
                out.push(add(self.origin, add(scaled(u, du), scaled(v, dv))));
            }
        }
        out
    }
}

/// Rayleigh–Sommerfeld coupling from a source element to a receiving point:
/// `w = (A·cosχ/d)·(1/(2πd) − j/λ)·e^{j2πd/λ}`.
pub fn coupling_coefficient(
    src: Point,
    src_area: f64,
    dst: Point,
    normal: Point,
    wavelength: f64,
) -> Result<C64> {
    if !(wavelength > 0.0) {
        return Err(Error::Geometry(format!("wavelength must be positive, got {wavelength}")));
    }
    let r = sub(dst, src);
    let d = norm(r);
    if d <= 0.0 {
        return Err(Error::Geometry(format!("coincident source and destination at {src:?}")));
    }
    let cos_chi = dot(r, normal) / (d * norm(normal));
    let amp = src_area * cos_chi / d;
    let k = C64::new(1.0 / (2.0 * PI * d), -1.0 / wavelength);
    Ok(k * amp * C64::from_polar(1.0, 2.0 * PI * d / wavelength))
}

/// Coupling matrix from every element of `from` to every element of `to`,
/// shape `[|to|, |from|]`.
pub fn propagation_matrix(from: &ElementGrid, to: &ElementGrid, wavelength: f64) -> Result<Tensor> {
    from.validate()?;
    to.validate()?;
    let gap = dot(sub(to.origin, from.origin), from.normal);
    let parallel = norm(cross(from.normal, to.normal)) < 1e-12;
    if parallel && gap.abs() < 1e-12 {
        return Err(Error::Geometry("source and destination grids share a plane".into()));
    }
    let src = from.positions();
    let dst = to.positions();
    let rows = par::try_map_indexed(dst.len(), Execution::available(), |i| {
        src.iter()
            .map(|&s| coupling_coefficient(s, from.element_area, dst[i], from.normal, wavelength))
            .collect::<Result<Vec<_>>>()
    })?;
    Tensor::complex(&[dst.len(), src.len()], rows.into_iter().flatten().collect())
}

/// Geometry and tunable phases of a stacked metasurface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimStack {
    pub layers: Vec<ElementGrid>,
    pub layer_spacing: f64,
    pub wavelength: f64,
    /// One phase vector per layer, interpreted modulo 2π.
    pub phases: Vec<Vec<f64>>,
}

/// Compact description of a uniform stack, as used in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub layers: usize,
    pub rows: usize,
    pub cols: usize,
    pub carrier_hz: f64,
    /// Element pitch in wavelengths.
    pub pitch_wavelengths: f64,
    /// Inter-layer distance in wavelengths.
    pub spacing_wavelengths: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            layers: 4,
            rows: 8,
            cols: 8,
            carrier_hz: DEFAULT_CARRIER_HZ,
            pitch_wavelengths: 0.5,
            spacing_wavelengths: 5.0,
        }
    }
}

impl SimSpec {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Builds the stack with its first layer centered at `origin`, layers
    /// following each other along `normal`. Phases start at zero.
    pub fn build(&self, origin: Point, normal: Point) -> Result<SimStack> {
        let lambda = self.wavelength();
        SimStack::uniform(
            self.layers,
            self.rows,
            self.cols,
            lambda,
            self.pitch_wavelengths * lambda,
            self.spacing_wavelengths * lambda,
            origin,
            normal,
        )
    }
}

impl SimStack {
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        layers: usize,
        rows: usize,
        cols: usize,
        wavelength: f64,
        pitch: f64,
        spacing: f64,
        origin: Point,
        normal: Point,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Geometry("a stack needs at least one layer".into()));
        }
        let grids = (0..layers)
            .map(|k| ElementGrid::new(rows, cols, pitch, add(origin, scaled(normal, k as f64 * spacing)), normal))
            .collect::<Result<Vec<_>>>()?;
        let stack = SimStack {
            phases: grids.iter().map(|g| vec![0.0; g.len()]).collect(),
            layers: grids,
            layer_spacing: spacing,
            wavelength,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Geometry("a stack needs at least one layer".into()));
        }
        if !(self.layer_spacing > 0.0) {
            return Err(Error::Geometry(format!("layer spacing must be positive, got {}", self.layer_spacing)));
        }
        if !(self.wavelength > 0.0) {
            return Err(Error::Geometry(format!("wavelength must be positive, got {}", self.wavelength)));
        }
        if self.phases.len() != self.layers.len() {
            return Err(Error::Geometry(format!(
                "{} phase vectors for {} layers",
                self.phases.len(),
                self.layers.len()
            )));
        }
        for (k, (g, p)) in self.layers.iter().zip(&self.phases).enumerate() {
            g.validate()?;
            if p.len() != g.len() {
                return Err(Error::Geometry(format!(
                    "layer {k} has {} elements but {} phases",
                    g.len(),
                    p.len()
                )));
            }
        }
        Ok(())
    }

    pub fn first_len(&self) -> usize {
        self.layers[0].len()
    }

    pub fn last_len(&self) -> usize {
        self.layers[self.layers.len() - 1].len()
    }

    pub fn total_phases(&self) -> usize {
        self.layers.iter().map(|g| g.len()).sum()
    }

    /// Inter-layer coupling matrices `P_{k→k+1}`; constant for a geometry.
    pub fn propagation_matrices(&self) -> Result<Vec<Tensor>> {
        self.layers
            .windows(2)
            .map(|w| propagation_matrix(&w[0], &w[1], self.wavelength))
            .collect()
    }

    /// Phase vectors as tensors, one `[N_k]` per layer.
    pub fn phase_tensors(&self) -> Vec<Tensor> {
        self.phases
            .iter()
            .map(|p| Tensor::real(&[p.len()], p.clone()).expect("length matches"))
            .collect()
    }

    /// Overwrites the phases from per-layer tensors.
    pub fn set_phases(&mut self, phases: &[Tensor]) -> Result<()> {
        if phases.len() != self.layers.len() {
            return Err(Error::Geometry(format!("{} phase tensors for {} layers", phases.len(), self.layers.len())));
        }
        for (k, t) in phases.iter().enumerate() {
            let v = t.real_values("set_phases")?;
            if v.len() != self.layers[k].len() {
                return Err(Error::shape("set_phases", &[v.len()], &[self.layers[k].len()]));
            }
            self.phases[k] = v.to_vec();
        }
        Ok(())
    }
}

/// Non-differentiable end-to-end transfer matrix `[|last|, |first|]`.
pub fn sim_transfer(stack: &SimStack) -> Result<Tensor> {
    stack.validate()?;
    let props = stack.propagation_matrices()?;
    sim_transfer_with(stack, &props)
}

/// [`sim_transfer`] with precomputed propagation matrices.
pub fn sim_transfer_with(stack: &SimStack, props: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let responses = stack
        .phase_tensors()
        .into_iter()
        .map(|p| {
            let v = tape.constant(p);
            tape.exp_j(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let props: Vec<Var> = props.iter().map(|p| tape.constant(p.clone())).collect();
    let eye = tape.constant(Tensor::eye_complex(stack.first_len()));
    let t = sim_apply(&mut tape, &responses, &props, eye)?;
    Ok(tape.value(t).clone())
}

/// Differentiable `T·x` through the stack without forming `T`.
///
/// `responses[k]` holds the unit-modulus responses of layer `k`, either
/// `[N_k]` (shared) or `[batch, N_k]` (one set per sample). `x` is
/// `[N_1, c]` or `[batch, N_1, c]`.
pub fn sim_apply(tape: &mut Tape, responses: &[Var], props: &[Var], x: Var) -> Result<Var> {
    if responses.len() != props.len() + 1 {
        return Err(Error::Contract(format!(
            "{} response vectors need {} propagation matrices, got {}",
            responses.len(),
            responses.len().saturating_sub(1),
            props.len()
        )));
    }
    let mut v = tape.scale_rows(responses[0], x)?;
    for (p, r) in props.iter().zip(&responses[1..]) {
        v = tape.matmul(*p, v)?;
        v = tape.scale_rows(*r, v)?;
    }
    Ok(v)
}

/// Received power at each receptor and the winning class (lowest index on
/// ties).
pub fn energy_detect(field: &[C64]) -> (Vec<f64>, usize) {
    let r: Vec<f64> = field.iter().map(|z| z.norm_sqr()).collect();
    let class = argmax(&r);
    (r, class)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    const Z: Point = [0.0, 0.0, 1.0];

    #[test]
    fn grid_positions_are_centered() {
        let g = ElementGrid::new(2, 3, 0.5, [0.0, 0.0, 1.0], Z).unwrap();
        let p = g.positions();
        assert_eq!(p.len(), 6);
        let mean: Point = p.iter().fold([0.0; 3], |a, &b| add(a, scaled(b, 1.0 / 6.0)));
        assert!(norm(sub(mean, [0.0, 0.0, 1.0])) < 1e-12);
        assert!((norm(sub(p[1], p[0])) - 0.5).abs() < 1e-12);
        assert!(p.iter().all(|q| (q[2] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(ElementGrid::new(0, 3, 0.5, [0.0; 3], Z).is_err());
        assert!(ElementGrid::new(1, 3, -0.5, [0.0; 3], Z).is_err());
        assert!(ElementGrid::new(1, 3, 0.5, [0.0; 3], [0.0, 0.0, 2.0]).is_err());
        let mut g = ElementGrid::new(1, 1, 0.5, [0.0; 3], Z).unwrap();
        g.element_area = 1.0;
        assert!(g.validate().is_err());
        assert!(coupling_coefficient([0.0; 3], 1.0, [0.0; 3], Z, 0.01).is_err());
        assert!(coupling_coefficient([0.0; 3], 1.0, [0.0, 0.0, 1.0], Z, 0.0).is_err());
    }

    #[test]
    fn coplanar_grids_are_rejected() {
        let a = ElementGrid::new(2, 2, 0.1, [0.0; 3], Z).unwrap();
        let b = ElementGrid::new(2, 2, 0.1, [1.0, 0.0, 0.0], Z).unwrap();
        assert!(matches!(propagation_matrix(&a, &b, 0.01), Err(Error::Geometry(_))));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
