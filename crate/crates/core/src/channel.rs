//! Spatially correlated Rayleigh channels with path loss, shadowing and
//! receiver noise.
//!
//! Link `G[p][q]` carries terminal `p`'s transmit aperture to terminal `q`'s
//! receive aperture and has shape `N_q x M_p`. The diagonal links are
//! self-interference.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{dbm_to_watts, Grid, SystemConfig};
use crate::error::{shape_err, Error, Result};
use crate::rng::stream;
use crate::wavefield::{unit_positions, ComplexMatrix, Side, UnitPosition};

/// Normalized sinc, `sin(πx)/(πx)`. Arguments within 1e-12 of a nonzero
/// integer return an exact zero.
pub fn sinc(x: f64) -> f64 {
    let k = x.round();
    if x == 0.0 {
        1.0
    } else if k != 0.0 && (x - k).abs() < 1e-12 {
        0.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Real symmetric matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RealMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl RealMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.data)
    }

    pub fn to_complex(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.n, self.n, |i, j| Complex64::new(self.get(i, j), 0.0))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let m = self.to_nalgebra() * other.to_nalgebra();
        Self {
            n: self.n,
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `R[i][k] = sinc(2 · dist(i, k) / λ)`.
pub fn spatial_correlation(positions: &[UnitPosition], wavelength: f64) -> Result<RealMatrix> {
    if !(wavelength > 0.0) {
        return Err(Error::InvalidArgument(format!("wavelength {wavelength}")));
    }
    if let Some(p) = positions.first() {
        if positions.iter().any(|q| (q.z - p.z).abs() > 1e-12) {
            return Err(Error::InvalidArgument("positions are not coplanar".into()));
        }
    }
    let n = positions.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
        for k in i + 1..n {
            let v = sinc(2.0 * positions[i].distance(&positions[k]) / wavelength);
            data[i * n + k] = v;
            data[k * n + i] = v;
        }
    }
    Ok(RealMatrix { n, data })
}

/// Symmetric PSD square root with negative eigenvalues clipped to zero.
pub fn psd_sqrt(r: &RealMatrix) -> Result<RealMatrix> {
    let n = r.n;
    for i in 0..n {
        for j in i + 1..n {
            if (r.get(i, j) - r.get(j, i)).abs() > 1e-10 {
                return Err(Error::InvalidArgument(format!(
                    "matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let eig = SymmetricEigen::new(r.to_nalgebra());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let q = &eig.eigenvectors;
    let s = q * d * q.transpose();
    let s = (&s + s.transpose()) * 0.5;
    Ok(RealMatrix {
        n,
        data: s.transpose().as_slice().to_vec(),
    })
}

/// I.i.d. `CN(0, 1)` entries.
pub fn draw_iid_rayleigh<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> ComplexMatrix {
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).unwrap();
    ComplexMatrix::from_fn(rows, cols, |_, _| {
        Complex64::new(normal.sample(rng), normal.sample(rng))
    })
}

/// `R_rx^{1/2} G̃ R_tx^{1/2}`.
pub fn correlated_channel(
    rx_sqrt: &ComplexMatrix,
    g: &ComplexMatrix,
    tx_sqrt: &ComplexMatrix,
) -> Result<ComplexMatrix> {
    if rx_sqrt.cols() != g.rows() || g.cols() != tx_sqrt.rows() {
        return Err(shape_err(
            "correlated_channel",
            format!(
                "{:?} * {:?} * {:?}",
                rx_sqrt.shape(),
                g.shape(),
                tx_sqrt.shape()
            ),
        ));
    }
    rx_sqrt.matmul(g)?.matmul(tx_sqrt)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathLossParams {
    pub reference_distance_m: f64,
    pub exponent: f64,
    pub shadowing_std_db: f64,
    pub distance_m: f64,
    pub wavelength_m: f64,
}

impl PathLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.reference_distance_m > 0.0) || !(self.wavelength_m > 0.0) {
            return Err(Error::InvalidArgument(
                "reference distance and wavelength must be positive".into(),
            ));
        }
        if !(self.distance_m >= self.reference_distance_m) {
            return Err(Error::InvalidArgument(format!(
                "link distance {} m below reference distance {} m",
                self.distance_m, self.reference_distance_m
            )));
        }
        if !(self.exponent > 0.0) || !(self.shadowing_std_db >= 0.0) {
            return Err(Error::InvalidArgument(
                "path loss exponent must be positive and shadowing std non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Free-space loss at the reference distance.
    pub fn reference_loss_db(&self) -> f64 {
        20.0 * (4.0 * std::f64::consts::PI * self.reference_distance_m / self.wavelength_m).log10()
    }
}

/// Log-distance path loss in dB; `shadowing_db` is the realized `X_δ`.
pub fn path_loss_db(p: &PathLossParams, shadowing_db: f64) -> Result<f64> {
    p.validate()?;
    Ok(p.reference_loss_db()
        + 10.0 * p.exponent * (p.distance_m / p.reference_distance_m).log10()
        + shadowing_db)
}

/// Draws `X_δ ~ N(0, δ²)`.
pub fn draw_shadowing<R: Rng + ?Sized>(std_db: f64, rng: &mut R) -> f64 {
    if std_db == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std_db).unwrap().sample(rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    pub dbm: f64,
    pub watts: f64,
}

impl NoiseParams {
    pub fn from_dbm(dbm: f64) -> Self {
        Self {
            dbm,
            watts: dbm_to_watts(dbm),
        }
    }
}

/// I.i.d. `CN(0, σ²)` samples.
pub fn draw_noise<R: Rng + ?Sized>(sigma2: f64, len: usize, rng: &mut R) -> Vec<Complex64> {
    if sigma2 <= 0.0 {
        return vec![Complex64::new(0.0, 0.0); len];
    }
    let normal = Normal::new(0.0, (sigma2 / 2.0).sqrt()).unwrap();
    (0..len)
        .map(|_| Complex64::new(normal.sample(rng), normal.sample(rng)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    /// Redrawn by the caller for every batch.
    Statistical,
    /// One frozen draw.
    Instantaneous,
}

/// The four links between two terminals.
#[derive(Clone, Debug)]
pub struct ChannelRealization {
    /// `links[p][q]`: transmitter `p` to receiver `q`.
    pub links: [[ComplexMatrix; 2]; 2],
    /// Linear amplitude gain applied to each link.
    pub gains: [[f64; 2]; 2],
    pub seed: u64,
    pub mode: ChannelMode,
}

impl ChannelRealization {
    /// Scaled identity cross links and no self-interference, for sanity runs
    /// on square antenna-only configurations.
    pub fn ideal(n: usize, gain: f64) -> Self {
        let id = ComplexMatrix::identity(n).scale(gain);
        let z = ComplexMatrix::zeros(n, n);
        Self {
            links: [[z.clone(), id.clone()], [id, z]],
            gains: [[0.0, gain], [gain, 0.0]],
            seed: 0,
            mode: ChannelMode::Instantaneous,
        }
    }

    pub fn link(&self, p: usize, q: usize) -> &ComplexMatrix {
        &self.links[p][q]
    }

    pub fn is_finite(&self) -> bool {
        self.links.iter().flatten().all(|m| m.is_finite())
    }
}

/// Precomputed correlation square roots and large-scale parameters for a
/// configuration.
#[derive(Clone, Debug)]
pub struct ChannelModel {
    tx_sqrt: [ComplexMatrix; 2],
    rx_sqrt: [ComplexMatrix; 2],
    cross: PathLossParams,
    si: PathLossParams,
    cross_shadowing: f64,
    si_shadowing: f64,
}

/// Correlation of an aperture grid with unit spacing `spacing`.
pub fn aperture_correlation(grid: Grid, spacing: f64, wavelength: f64) -> Result<RealMatrix> {
    let pos = unit_positions(grid, spacing, 0, spacing, Side::Tx)?;
    spatial_correlation(&pos, wavelength)
}

fn aperture_sqrt(grid: Grid, spacing: f64, wavelength: f64, enabled: bool) -> Result<ComplexMatrix> {
    if !enabled {
        return Ok(ComplexMatrix::identity(grid.count()));
    }
    Ok(psd_sqrt(&aperture_correlation(grid, spacing, wavelength)?)?.to_complex())
}

impl ChannelModel {
    pub fn new(config: &SystemConfig) -> Result<Self> {
        let geo = config.geometry();
        let ch = &config.channel;
        let lambda = geo.wavelength_m;
        let mut tx = Vec::new();
        let mut rx = Vec::new();
        for t in &geo.terminals {
            tx.push(aperture_sqrt(
                t.tx_aperture_grid(),
                geo.unit_spacing_m,
                lambda,
                ch.spatial_correlation,
            )?);
            rx.push(aperture_sqrt(
                t.rx_aperture_grid(),
                geo.unit_spacing_m,
                lambda,
                ch.spatial_correlation,
            )?);
        }
        let cross = PathLossParams {
            reference_distance_m: ch.reference_distance_m,
            exponent: ch.path_loss_exponent,
            shadowing_std_db: ch.shadowing_std_db,
            distance_m: config.system.distance_m,
            wavelength_m: lambda,
        };
        // the SI distance may fall inside the reference distance; the
        // reference then moves to the SI distance, i.e. free-space loss.
        let si = PathLossParams {
            reference_distance_m: ch.reference_distance_m.min(ch.si_distance_m),
            distance_m: ch.si_distance_m,
            ..cross
        };
        cross.validate()?;
        si.validate()?;
        let [t0, t1]: [ComplexMatrix; 2] = tx.try_into().unwrap();
        let [r0, r1]: [ComplexMatrix; 2] = rx.try_into().unwrap();
        Ok(Self {
            tx_sqrt: [t0, t1],
            rx_sqrt: [r0, r1],
            cross,
            si,
            cross_shadowing: ch.shadowing_std_db,
            si_shadowing: if ch.si_shadowing { ch.shadowing_std_db } else { 0.0 },
        })
    }

    /// Deterministic path loss (no shadowing) of a link.
    pub fn mean_path_loss_db(&self, p: usize, q: usize) -> f64 {
        let params = if p == q { &self.si } else { &self.cross };
        path_loss_db(params, 0.0).expect("validated at construction")
    }

    /// Draws all four links from `seed`.
    pub fn realize(&self, seed: u64, mode: ChannelMode) -> Result<ChannelRealization> {
        let mut rng = stream(seed, crate::rng::Purpose::Channel);
        self.realize_with(&mut rng, seed, mode)
    }

    pub fn realize_with(
        &self,
        rng: &mut ChaCha8Rng,
        seed: u64,
        mode: ChannelMode,
    ) -> Result<ChannelRealization> {
        let mut links: Vec<ComplexMatrix> = Vec::with_capacity(4);
        let mut gains = [[0.0; 2]; 2];
        for p in 0..2 {
            for q in 0..2 {
                let (params, std) = if p == q {
                    (&self.si, self.si_shadowing)
                } else {
                    (&self.cross, self.cross_shadowing)
                };
                let x = draw_shadowing(std, rng);
                let pl = path_loss_db(params, x)?;
                let gain = 10f64.powf(-pl / 20.0);
                let g = draw_iid_rayleigh(self.rx_sqrt[q].rows(), self.tx_sqrt[p].rows(), rng);
                let h = correlated_channel(&self.rx_sqrt[q], &g, &self.tx_sqrt[p])?.scale(gain);
                gains[p][q] = gain;
                links.push(h);
            }
        }
        let mut it = links.into_iter();
        let mut next = || it.next().unwrap();
        let links = [[next(), next()], [next(), next()]];
        Ok(ChannelRealization {
            links,
            gains,
            seed,
            mode,
        })
    }
}

/// Convenience wrapper building the model and drawing one realization.
pub fn realize_channels(config: &SystemConfig, seed: u64, mode: ChannelMode) -> Result<ChannelRealization> {
    ChannelModel::new(config)?.realize(seed, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sinc_zeros() {
        assert_eq!(sinc(0.0), 1.0);
        assert!(sinc(1.0).abs() < 1e-16);
        assert!(sinc(2.0).abs() < 1e-15);
    }

    #[test]
    fn half_wavelength_pair_is_uncorrelated() {
        let lambda = 0.01;
        let pos = unit_positions(Grid::new(2, 1), lambda / 2.0, 0, 1.0, Side::Tx).unwrap();
        let r = spatial_correlation(&pos, lambda).unwrap();
        assert_eq!(r.get(0, 0), 1.0);
        assert_eq!(r.get(1, 1), 1.0);
        assert!(r.get(0, 1).abs() < 1e-15);
        assert_eq!(r.get(0, 1), r.get(1, 0));
    }

    #[test]
    fn correlation_rejects_non_coplanar() {
        let a = UnitPosition { x: 0.0, y: 0.0, z: 0.0 };
        let b = UnitPosition { x: 0.0, y: 0.0, z: 1.0 };
        assert!(spatial_correlation(&[a, b], 0.01).is_err());
    }

    #[test]
    fn psd_sqrt_examples() {
        let i = RealMatrix::identity(3);
        let s = psd_sqrt(&i).unwrap();
        for (a, b) in s.data.iter().zip(&i.data) {
            assert!((a - b).abs() < 1e-14);
        }
        let d = RealMatrix { n: 2, data: vec![4.0, 0.0, 0.0, 1.0] };
        let s = psd_sqrt(&d).unwrap();
        let want = [2.0, 0.0, 0.0, 1.0];
        for (a, b) in s.data.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        let bad = RealMatrix { n: 2, data: vec![1.0, 0.5, 0.4, 1.0] };
        assert!(matches!(psd_sqrt(&bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn psd_sqrt_reconstructs_sinc_matrix() {
        let lambda = 0.0107;
        let pos = unit_positions(Grid::new(2, 2), lambda / 3.0, 0, 1.0, Side::Tx).unwrap();
        let r = spatial_correlation(&pos, lambda).unwrap();
        let s = psd_sqrt(&r).unwrap();
        let rec = s.matmul(&s);
        let err: f64 = rec
            .data
            .iter()
            .zip(&r.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err / r.frobenius_norm() < 1e-8, "{err}");
    }

    #[test]
    fn clipping_bounded_by_most_negative_eigenvalue() {
        // dense 9x9 grid at λ/4 spacing is numerically near-singular
        let lambda = 1.0;
        let pos = unit_positions(Grid::square(9), 0.25, 0, 1.0, Side::Tx).unwrap();
        let r = spatial_correlation(&pos, lambda).unwrap();
        let eig = SymmetricEigen::new(r.to_nalgebra());
        let most_neg = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::min).abs();
        let s = psd_sqrt(&r).unwrap();
        let rec = s.matmul(&s);
        let max_dev = rec
            .data
            .iter()
            .zip(&r.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev <= most_neg * r.n as f64 + 1e-10);
    }

    #[test]
    fn rayleigh_moments() {
        let g = draw_iid_rayleigh(100, 1000, &mut rng(1));
        let n = 100_000.0;
        let mean_re: f64 = g.re().iter().sum::<f64>() / n;
        let mean_im: f64 = g.im().iter().sum::<f64>() / n;
        assert!(Complex64::new(mean_re, mean_im).norm() < 0.02);
        let p: f64 = g.re().iter().chain(g.im()).map(|v| v * v).sum::<f64>() / n;
        assert!((p - 1.0).abs() < 0.02, "{p}");
        assert_eq!(g, draw_iid_rayleigh(100, 1000, &mut rng(1)));
    }

    #[test]
    fn identity_correlation_passes_through() {
        let g = draw_iid_rayleigh(3, 4, &mut rng(2));
        let out =
            correlated_channel(&ComplexMatrix::identity(3), &g, &ComplexMatrix::identity(4)).unwrap();
        assert_eq!(out, g);
        assert!(correlated_channel(&ComplexMatrix::identity(4), &g, &ComplexMatrix::identity(4))
            .is_err());
    }

    #[test]
    fn correlated_two_by_two_by_hand() {
        let rx = ComplexMatrix::from_fn(2, 2, |i, j| Complex64::new([[1.0, 0.2], [0.2, 1.0]][i][j], 0.0));
        let tx = ComplexMatrix::from_fn(2, 2, |i, j| Complex64::new([[0.9, -0.1], [-0.1, 0.9]][i][j], 0.0));
        let g = ComplexMatrix::from_fn(2, 2, |i, j| Complex64::new(i as f64 + 1.0, j as f64 - 0.5));
        let out = correlated_channel(&rx, &g, &tx).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in 0..2 {
                    for b in 0..2 {
                        acc += rx.get(i, a) * g.get(a, b) * tx.get(b, j);
                    }
                }
                assert!((acc - out.get(i, j)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn kronecker_covariance() {
        // vec(G) stacks columns; cov = R_tx^T ⊗ R_rx, R_tx real symmetric
        let r_rx = RealMatrix { n: 2, data: vec![1.0, 0.6, 0.6, 1.0] };
        let r_tx = RealMatrix { n: 2, data: vec![1.0, -0.3, -0.3, 1.0] };
        let rx = psd_sqrt(&r_rx).unwrap().to_complex();
        let tx = psd_sqrt(&r_tx).unwrap().to_complex();
        let draws = 20_000;
        let mut r = rng(3);
        let mut cov = [[Complex64::new(0.0, 0.0); 4]; 4];
        for _ in 0..draws {
            let g = draw_iid_rayleigh(2, 2, &mut r);
            let h = correlated_channel(&rx, &g, &tx).unwrap();
            let v: Vec<Complex64> = (0..2).flat_map(|c| (0..2).map(move |rr| (rr, c))).map(|(rr, c)| h.get(rr, c)).collect();
            for a in 0..4 {
                for b in 0..4 {
                    cov[a][b] += v[a] * v[b].conj();
                }
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                let want = r_tx.get(a / 2, b / 2) * r_rx.get(a % 2, b % 2);
                num += (cov[a][b] / draws as f64 - want).norm_sqr();
                den += want * want;
            }
        }
        assert!((num / den).sqrt() < 0.05, "{}", (num / den).sqrt());
    }

    #[test]
    fn identity_correlation_preserves_variance() {
        let mut r = rng(4);
        let mut acc = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let g = draw_iid_rayleigh(2, 2, &mut r);
            let h = correlated_channel(&ComplexMatrix::identity(2), &g, &ComplexMatrix::identity(2)).unwrap();
            acc += h.frobenius_norm().powi(2);
        }
        assert!((acc / (4.0 * draws as f64) - 1.0).abs() < 0.02);
    }

    fn pl(d: f64) -> PathLossParams {
        PathLossParams {
            reference_distance_m: 1.0,
            exponent: 3.5,
            shadowing_std_db: 0.0,
            distance_m: d,
            wavelength_m: 0.0107,
        }
    }

    #[test]
    fn path_loss_reference_value() {
        let want = 20.0 * (4.0 * std::f64::consts::PI / 0.0107f64).log10();
        assert!((path_loss_db(&pl(1.0), 0.0).unwrap() - want).abs() < 1e-12);
        assert!((want - 61.396_521_726_737_7).abs() < 1e-9);
    }

    #[test]
    fn path_loss_decade() {
        let a = path_loss_db(&pl(1.0), 0.0).unwrap();
        let b = path_loss_db(&pl(10.0), 0.0).unwrap();
        assert!((b - a - 35.0).abs() < 1e-12);
    }

    #[test]
    fn path_loss_rejects_short_link() {
        assert!(matches!(path_loss_db(&pl(0.5), 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shadowing_is_seeded() {
        let a = draw_shadowing(9.0, &mut rng(5));
        let b = draw_shadowing(9.0, &mut rng(5));
        assert_eq!(a, b);
        assert_eq!(draw_shadowing(0.0, &mut rng(5)), 0.0);
    }

    #[test]
    fn noise_examples() {
        assert!(draw_noise(0.0, 5, &mut rng(6)).iter().all(|z| z.norm() == 0.0));
        let s2 = 3.0;
        let v = draw_noise(s2, 100_000, &mut rng(6));
        let p = v.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64;
        assert!((p / s2 - 1.0).abs() < 0.02);
        let n = NoiseParams::from_dbm(-110.0);
        assert!((n.watts - 1e-14).abs() < 1e-26);
    }

    #[test]
    fn reference_shapes() {
        let cfg = SystemConfig::reference();
        let real = realize_channels(&cfg, 1, ChannelMode::Instantaneous).unwrap();
        for p in 0..2 {
            for q in 0..2 {
                assert_eq!(real.link(p, q).shape(), (81, 81));
                assert!(real.gains[p][q] > 0.0);
            }
        }
        assert!(real.is_finite());
    }

    #[test]
    fn baseline_shapes_follow_antennas() {
        let mut cfg = SystemConfig::reference();
        for t in cfg.sim.terminals.iter_mut() {
            t.tx_layers = 0;
            t.rx_layers = 0;
        }
        let real = realize_channels(&cfg, 1, ChannelMode::Instantaneous).unwrap();
        // terminal 1 has 16 antennas, terminal 2 has 9
        assert_eq!(real.link(0, 1).shape(), (9, 16));
        assert_eq!(real.link(1, 0).shape(), (16, 9));
    }

    #[test]
    fn realization_determinism() {
        let cfg = SystemConfig::miniature();
        let model = ChannelModel::new(&cfg).unwrap();
        let a = model.realize(7, ChannelMode::Statistical).unwrap();
        let b = model.realize(7, ChannelMode::Statistical).unwrap();
        let c = model.realize(8, ChannelMode::Statistical).unwrap();
        assert_eq!(a.links, b.links);
        assert_ne!(a.links[0][1], c.links[0][1]);
    }

    #[test]
    fn self_interference_dominates() {
        let cfg = SystemConfig::reference();
        let m = ChannelModel::new(&cfg).unwrap();
        assert!(m.mean_path_loss_db(0, 0) + 60.0 < m.mean_path_loss_db(0, 1));
    }

    #[test]
    fn degenerate_composition_matches_iid() {
        let mut cfg = SystemConfig::miniature();
        cfg.channel.spatial_correlation = false;
        cfg.channel.shadowing_std_db = 0.0;
        let m = ChannelModel::new(&cfg).unwrap();
        let real = m.realize(9, ChannelMode::Statistical).unwrap();
        let g = real.link(0, 1).scale(1.0 / real.gains[0][1]);
        let p = g.frobenius_norm().powi(2) / (g.rows() * g.cols()) as f64;
        assert!(p > 0.2 && p < 5.0);
    }

    proptest::proptest! {
        #[test]
        fn path_loss_increasing(d in 1.0f64..1000.0, step in 0.01f64..100.0) {
            let a = path_loss_db(&pl(d), 0.0).unwrap();
            let b = path_loss_db(&pl(d + step), 0.0).unwrap();
            proptest::prop_assert!(b > a);
        }

        #[test]
        fn correlation_symmetric_unit_diag(nx in 1usize..5, ny in 1usize..5, frac in 0.1f64..1.0) {
            let pos = unit_positions(Grid::new(nx, ny), frac, 0, 1.0, Side::Tx).unwrap();
            let r = spatial_correlation(&pos, 1.0).unwrap();
            for i in 0..r.n {
                proptest::prop_assert_eq!(r.get(i, i), 1.0);
                for j in 0..r.n {
                    proptest::prop_assert_eq!(r.get(i, j), r.get(j, i));
                }
            }
        }
    }
}
