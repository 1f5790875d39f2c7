//! Geometry and wave propagation inside a stacked metasurface.
//!
//! Each terminal carries a TX stack and an RX stack. Layer 0 of a stack is the
//! antenna array; layers `1..=L` (or `1..=K`) are metasurfaces spaced by the
//! layer gap along the stack axis. Inter-layer coupling follows the
//! Rayleigh–Sommerfeld diffraction integral discretized over EM units of area
//! `S = d * d`.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;

use crate::config::{GeometryConfig, Grid};
use crate::error::{shape_err, Error, Result};

/// Which side of a terminal a stack sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Tx,
    Rx,
}

impl Side {
    /// Sign of the source layer's normal along the stack axis. TX waves travel
    /// away from the antennas (+z), RX waves toward them (-z).
    fn normal_sign(self) -> f64 {
        match self {
            Side::Tx => 1.0,
            Side::Rx => -1.0,
        }
    }
}

/// Centre of one EM unit or antenna element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitPosition {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitPosition {
    pub fn distance(&self, other: &UnitPosition) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Dense complex matrix stored as separate row-major real and imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            re: vec![0.0; rows * cols],
            im: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.re[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_parts(rows: usize, cols: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != rows * cols || im.len() != rows * cols {
            return Err(shape_err(
                "ComplexMatrix::from_parts",
                format!(
                    "{rows}x{cols} needs {} entries, got re={} im={}",
                    rows * cols,
                    re.len(),
                    im.len()
                ),
            ));
        }
        Ok(Self { rows, cols, re, im })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, f(r, c));
            }
        }
        m
    }

    pub fn diag(values: &[Complex64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        let i = r * self.cols + c;
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        let i = r * self.cols + c;
        self.re[i] = v.re;
        self.im[i] = v.im;
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            re: self.re.iter().map(|v| v * s).collect(),
            im: self.im.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.re
            .iter()
            .chain(&self.im)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "ComplexMatrix::sub",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            re: self.re.iter().zip(&other.re).map(|(a, b)| a - b).collect(),
            im: self.im.iter().zip(&other.im).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(shape_err(
                "ComplexMatrix::matmul",
                format!(
                    "{}x{} * {}x{}",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            for p in 0..k {
                let ar = self.re[i * k + p];
                let ai = self.im[i * k + p];
                if ar == 0.0 && ai == 0.0 {
                    continue;
                }
                let row = i * m;
                for j in 0..m {
                    let br = rhs.re[p * m + j];
                    let bi = rhs.im[p * m + j];
                    out.re[row + j] += ar * br - ai * bi;
                    out.im[row + j] += ar * bi + ai * br;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        if x.len() != self.cols {
            return Err(shape_err(
                "ComplexMatrix::matvec",
                format!("{}x{} * vector of {}", self.rows, self.cols, x.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.get(r, c) * x[c]).sum())
            .collect())
    }
}

/// Positions of a centered planar grid at `z = layer * layer_spacing`.
///
/// The grid centroid sits on the stack axis. RX stacks use the same local
/// coordinates; only the propagation direction differs (see [`Side`]).
pub fn unit_positions(
    grid: Grid,
    spacing: f64,
    layer: usize,
    layer_spacing: f64,
    _side: Side,
) -> Result<Vec<UnitPosition>> {
    if !(spacing > 0.0) || !(layer_spacing > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "spacing {spacing} and layer spacing {layer_spacing} must be positive"
        )));
    }
    if grid.x == 0 || grid.y == 0 {
        return Err(Error::InvalidConfig(format!("empty grid {grid}")));
    }
    let z = layer as f64 * layer_spacing;
    let cx = (grid.x as f64 - 1.0) / 2.0;
    let cy = (grid.y as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(grid.count());
    for iy in 0..grid.y {
        for ix in 0..grid.x {
            out.push(UnitPosition {
                x: (ix as f64 - cx) * spacing,
                y: (iy as f64 - cy) * spacing,
                z,
            });
        }
    }
    Ok(out)
}

/// Constants entering the diffraction coefficient.
#[derive(Clone, Copy, Debug)]
pub struct DiffractionParams {
    pub frequency_hz: f64,
    pub light_speed_mps: f64,
    /// Radiating area of one unit.
    pub unit_area: f64,
}

impl From<&GeometryConfig> for DiffractionParams {
    fn from(g: &GeometryConfig) -> Self {
        Self {
            frequency_hz: g.frequency_hz,
            light_speed_mps: g.light_speed_mps,
            unit_area: g.unit_area(),
        }
    }
}

/// Rayleigh–Sommerfeld coupling from `src` to `dst`:
/// `(S cos χ / r) (1/(2π r) − j f/c) exp(j 2π r f / c)`, with χ measured from
/// the source layer's normal.
pub fn diffraction_coefficient(
    src: &UnitPosition,
    dst: &UnitPosition,
    params: &DiffractionParams,
    side: Side,
) -> Result<Complex64> {
    if !(params.unit_area > 0.0) {
        return Err(Error::InvalidConfig("unit area must be positive".into()));
    }
    let r = src.distance(dst);
    if !(r > 0.0) {
        return Err(Error::SingularGeometry(format!(
            "coincident points {src:?} and {dst:?}"
        )));
    }
    let cos_chi = (dst.z - src.z) * side.normal_sign() / r;
    let k = params.frequency_hz / params.light_speed_mps;
    let amplitude = params.unit_area * cos_chi / r;
    let radial = Complex64::new(1.0 / (2.0 * PI * r), -k);
    let phase = Complex64::from_polar(1.0, TAU * r * k);
    Ok(radial * phase * amplitude)
}

/// Coupling matrix between two layers; entry `(m, m̃)` couples `prev[m̃]` to
/// `next[m]`, so the shape is `|next| × |prev|`.
pub fn transmission_matrix(
    prev: &[UnitPosition],
    next: &[UnitPosition],
    params: &DiffractionParams,
    side: Side,
) -> Result<ComplexMatrix> {
    if prev.is_empty() || next.is_empty() {
        return Err(Error::InvalidConfig("empty layer".into()));
    }
    let mut m = ComplexMatrix::zeros(next.len(), prev.len());
    for (i, dst) in next.iter().enumerate() {
        for (j, src) in prev.iter().enumerate() {
            m.set(i, j, diffraction_coefficient(src, dst, params, side)?);
        }
    }
    Ok(m)
}

/// Diagonal unit-modulus mask `diag(exp(j θ))`.
pub fn phase_mask(phases: &[f64], size: usize) -> Result<ComplexMatrix> {
    if phases.len() != size {
        return Err(Error::InvalidConfig(format!(
            "phase vector of length {} for a {size}-unit layer",
            phases.len()
        )));
    }
    if phases.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument("non-finite phase".into()));
    }
    let diag: Vec<Complex64> = phases.iter().map(|&t| Complex64::from_polar(1.0, t)).collect();
    Ok(ComplexMatrix::diag(&diag))
}

/// Wraps a phase into `[0, 2π)`.
pub fn wrap_phase(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// One metasurface stack: fixed transmission matrices plus phase vectors.
///
/// TX: `transmissions[l-1] = V^l` (maps layer `l-1` onto layer `l`) and
/// `phases[l-1] = θ^l`. RX: `transmissions[k-1] = U^k` (maps layer `k` onto
/// layer `k-1`) and `phases[k-1] = ξ^k`.
#[derive(Clone, Debug)]
pub struct SimOperator {
    pub side: Side,
    pub terminal: usize,
    pub transmissions: Vec<ComplexMatrix>,
    pub phases: Vec<Vec<f64>>,
}

impl SimOperator {
    /// Builds the fixed transmission chain of terminal `terminal` (0-based)
    /// with all phases set to zero.
    pub fn build(geometry: &GeometryConfig, terminal: usize, side: Side) -> Result<Self> {
        let transmissions = stack_transmissions(geometry, terminal, side)?;
        let phases = transmissions
            .iter()
            .map(|t| match side {
                Side::Tx => vec![0.0; t.rows()],
                Side::Rx => vec![0.0; t.cols()],
            })
            .collect();
        Ok(Self {
            side,
            terminal,
            transmissions,
            phases,
        })
    }

    pub fn layers(&self) -> usize {
        self.transmissions.len()
    }

    pub fn set_phases(&mut self, phases: Vec<Vec<f64>>) -> Result<()> {
        if phases.len() != self.transmissions.len() {
            return Err(Error::InvalidConfig(format!(
                "{} phase vectors for {} layers",
                phases.len(),
                self.transmissions.len()
            )));
        }
        self.phases = phases;
        Ok(())
    }

    /// Phases wrapped to `[0, 2π)` for hardware export.
    pub fn canonical_phases(&self) -> Vec<Vec<f64>> {
        self.phases
            .iter()
            .map(|v| v.iter().map(|&p| wrap_phase(p)).collect())
            .collect()
    }
}

/// Fixed transmission matrices for one stack in application order of the
/// layer index (`V^1..V^L` or `U^1..U^K`).
pub fn stack_transmissions(
    geometry: &GeometryConfig,
    terminal: usize,
    side: Side,
) -> Result<Vec<ComplexMatrix>> {
    let t = geometry
        .terminals
        .get(terminal)
        .ok_or_else(|| Error::InvalidConfig(format!("no terminal {terminal}")))?;
    let params = DiffractionParams::from(geometry);
    let (layers, antennas, units) = match side {
        Side::Tx => (t.tx_layers, t.tx_antennas, t.tx_units),
        Side::Rx => (t.rx_layers, t.rx_antennas, t.rx_units),
    };
    let positions = |layer: usize| {
        let grid = if layer == 0 { antennas } else { units };
        unit_positions(grid, geometry.unit_spacing_m, layer, geometry.layer_spacing_m, side)
    };
    let mut out = Vec::with_capacity(layers);
    for l in 1..=layers {
        let lower = positions(l - 1)?;
        let upper = positions(l)?;
        let m = match side {
            Side::Tx => transmission_matrix(&lower, &upper, &params, side)?,
            Side::Rx => transmission_matrix(&upper, &lower, &params, side)?,
        };
        out.push(m);
    }
    Ok(out)
}

fn check_phases(sim: &SimOperator, want: Side) -> Result<()> {
    if sim.side != want {
        return Err(Error::InvalidConfig(format!(
            "expected a {want:?} stack, got {:?}",
            sim.side
        )));
    }
    if sim.phases.len() != sim.transmissions.len() {
        return Err(Error::InvalidConfig(format!(
            "{} phase vectors for {} layers",
            sim.phases.len(),
            sim.transmissions.len()
        )));
    }
    Ok(())
}

/// `T = Φ^L V^L ⋯ Φ^1 V^1`; identity on the antenna plane when `L = 0`.
pub fn tx_propagation(sim: &SimOperator, antennas: usize) -> Result<ComplexMatrix> {
    check_phases(sim, Side::Tx)?;
    let mut acc = ComplexMatrix::identity(antennas);
    for (v, theta) in sim.transmissions.iter().zip(&sim.phases) {
        let mask = phase_mask(theta, v.rows())?;
        acc = mask.matmul(&v.matmul(&acc)?)?;
    }
    Ok(acc)
}

/// `R = U^1 Ψ^1 U^2 Ψ^2 ⋯ U^K Ψ^K`; identity on the antenna plane when `K = 0`.
pub fn rx_propagation(sim: &SimOperator, antennas: usize) -> Result<ComplexMatrix> {
    check_phases(sim, Side::Rx)?;
    let mut acc = ComplexMatrix::identity(antennas);
    for (u, xi) in sim.transmissions.iter().zip(&sim.phases) {
        let mask = phase_mask(xi, u.cols())?;
        acc = acc.matmul(&u.matmul(&mask)?)?;
    }
    Ok(acc)
}
