//! Experiment configuration.
//!
//! A single JSON document with one section per parameter group (system,
//! channel, SIM, training, evaluation). Every field is optional in the file;
//! missing fields take the reference values from [`SystemConfig::reference`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Planar grid dimensions (columns × rows of elements).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Grid {
    pub x: usize,
    pub y: usize,
}

impl Grid {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub const fn square(n: usize) -> Self {
        Self { x: n, y: n }
    }

    pub const fn count(&self) -> usize {
        self.x * self.y
    }
}

impl From<[usize; 2]> for Grid {
    fn from(v: [usize; 2]) -> Self {
        Grid::new(v[0], v[1])
    }
}

impl From<Grid> for [usize; 2] {
    fn from(g: Grid) -> Self {
        [g.x, g.y]
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.x, self.y)
    }
}

/// Front-end layout of one terminal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSim {
    /// Number of TX metasurface layers (0 = no TX-SIM).
    pub tx_layers: usize,
    /// Number of RX metasurface layers (0 = no RX-SIM).
    pub rx_layers: usize,
    pub tx_units: Grid,
    pub rx_units: Grid,
    pub tx_antennas: Grid,
    pub rx_antennas: Grid,
}

impl TerminalSim {
    /// Elements on the outermost TX plane, i.e. the channel's input width.
    pub fn tx_aperture(&self) -> usize {
        if self.tx_layers == 0 {
            self.tx_antennas.count()
        } else {
            self.tx_units.count()
        }
    }

    /// Elements on the outermost RX plane, i.e. the channel's output width.
    pub fn rx_aperture(&self) -> usize {
        if self.rx_layers == 0 {
            self.rx_antennas.count()
        } else {
            self.rx_units.count()
        }
    }

    pub fn tx_aperture_grid(&self) -> Grid {
        if self.tx_layers == 0 {
            self.tx_antennas
        } else {
            self.tx_units
        }
    }

    pub fn rx_aperture_grid(&self) -> Grid {
        if self.rx_layers == 0 {
            self.rx_antennas
        } else {
            self.rx_units
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub frequency_hz: f64,
    pub light_speed_mps: f64,
    /// Distance between terminal 1 and terminal 2.
    pub distance_m: f64,
    /// Bits per symbol sent by terminal 1 and terminal 2.
    pub bits: [usize; 2],
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            frequency_hz: 28e9,
            light_speed_mps: 299_792_458.0,
            distance_m: 50.0,
            bits: [12, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub reference_distance_m: f64,
    pub path_loss_exponent: f64,
    pub shadowing_std_db: f64,
    pub noise_dbm: f64,
    /// Separation between a terminal's own TX and RX apertures.
    pub si_distance_m: f64,
    /// Apply log-normal shadowing to the self-interference links too.
    pub si_shadowing: bool,
    /// Use sinc spatial correlation; `false` gives i.i.d. Rayleigh links.
    pub spatial_correlation: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            reference_distance_m: 1.0,
            path_loss_exponent: 3.5,
            shadowing_std_db: 9.0,
            noise_dbm: -110.0,
            si_distance_m: 0.5,
            si_shadowing: false,
            spatial_correlation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// EM-unit (and antenna) pitch in wavelengths.
    pub unit_spacing_wavelengths: f64,
    /// Gap between adjacent metasurface layers in wavelengths.
    pub layer_spacing_wavelengths: f64,
    pub terminals: [TerminalSim; 2],
}

impl Default for SimConfig {
    fn default() -> Self {
        let t = |ant: usize| TerminalSim {
            tx_layers: 3,
            rx_layers: 3,
            tx_units: Grid::square(9),
            rx_units: Grid::square(9),
            tx_antennas: Grid::square(ant),
            rx_antennas: Grid::square(ant),
        };
        Self {
            unit_spacing_wavelengths: 0.5,
            layer_spacing_wavelengths: 0.5,
            terminals: [t(4), t(3)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Epochs between successive learning-rate decays.
    pub decay_interval: usize,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Beta(α, β) shape of the training transmit-power distribution.
    pub power_alpha: f64,
    pub power_beta: f64,
    pub power_min_dbm: f64,
    pub power_max_dbm: f64,
    /// Defaults to `epochs / 10`.
    pub finetune_epochs: Option<usize>,
    /// Defaults to `learning_rate / 10`.
    pub finetune_learning_rate: Option<f64>,
    /// Learn the per-antenna power split instead of the equal split.
    pub trainable_power: bool,
    /// Inject receiver noise while training.
    pub noise: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 1000,
            learning_rate: 0.005,
            lr_decay: 0.95,
            decay_interval: 50,
            lr_floor: 1e-5,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            power_alpha: 2.0,
            power_beta: 2.0,
            power_min_dbm: -10.0,
            power_max_dbm: 30.0,
            finetune_epochs: None,
            finetune_learning_rate: None,
            trainable_power: false,
            noise: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.epochs / 10)
    }

    pub fn finetune_learning_rate(&self) -> f64 {
        self.finetune_learning_rate
            .unwrap_or(self.learning_rate / 10.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of instantaneous channel realizations.
    pub monte_carlo: usize,
    /// Symbols tested per (realization, power) point.
    pub test_symbols: usize,
    pub power_sweep_dbm: Vec<f64>,
    pub seed: u64,
    /// Also evaluate the no-SIM conventional baseline.
    pub baseline: bool,
    /// Symbols per forward pass; defaults to the training batch size.
    pub chunk_size: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            monte_carlo: 10,
            test_symbols: 10_000,
            power_sweep_dbm: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            seed: 1000,
            baseline: false,
            chunk_size: None,
        }
    }
}

/// Every experiment parameter in one validated record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub system: SystemSection,
    pub channel: ChannelConfig,
    pub sim: SimConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
}

/// Physical layout derived from a [`SystemConfig`], all lengths in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub frequency_hz: f64,
    pub wavelength_m: f64,
    pub light_speed_mps: f64,
    pub unit_spacing_m: f64,
    pub layer_spacing_m: f64,
    pub terminals: [TerminalSim; 2],
}

impl GeometryConfig {
    /// Area of one EM unit, `d * d`.
    pub fn unit_area(&self) -> f64 {
        self.unit_spacing_m * self.unit_spacing_m
    }

    pub fn validate(&self) -> Result<()> {
        let rel = (self.frequency_hz * self.wavelength_m - self.light_speed_mps).abs()
            / self.light_speed_mps;
        if !(rel <= 1e-6) {
            return Err(Error::InvalidConfig(format!(
                "f*lambda = {} differs from c = {} (relative {rel:e})",
                self.frequency_hz * self.wavelength_m,
                self.light_speed_mps
            )));
        }
        if !(self.unit_spacing_m > 0.0) || !(self.layer_spacing_m > 0.0) {
            return Err(Error::InvalidConfig(
                "unit and layer spacing must be positive".into(),
            ));
        }
        for (i, t) in self.terminals.iter().enumerate() {
            for (name, g) in [
                ("tx_units", t.tx_units),
                ("rx_units", t.rx_units),
                ("tx_antennas", t.tx_antennas),
                ("rx_antennas", t.rx_antennas),
            ] {
                if g.x == 0 || g.y == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "terminal {} {name} grid {g} must be at least 1x1",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

impl SystemConfig {
    /// Reference parameters (28 GHz, 9x9-unit three-layer SIMs, 16/9 antennas,
    /// 12/8 bits) with desk-scale evaluation counts.
    pub fn reference() -> Self {
        Self::default()
    }

    /// Full evaluation scale: 100 realizations, 10^5 test symbols.
    pub fn with_full_scale(mut self) -> Self {
        self.evaluation.monte_carlo = 100;
        self.evaluation.test_symbols = 100_000;
        self
    }

    /// Small configuration used by the test-suite: 2x2 antennas, 4x4 units,
    /// two layers per stack, 4+4 bits, batch 256, 500 epochs.
    pub fn miniature() -> Self {
        let t = TerminalSim {
            tx_layers: 2,
            rx_layers: 2,
            tx_units: Grid::square(4),
            rx_units: Grid::square(4),
            tx_antennas: Grid::square(2),
            rx_antennas: Grid::square(2),
        };
        let mut cfg = Self::default();
        cfg.system.bits = [4, 4];
        cfg.sim.terminals = [t.clone(), t];
        cfg.training.batch_size = 256;
        cfg.training.epochs = 500;
        cfg.evaluation.monte_carlo = 5;
        cfg.evaluation.power_sweep_dbm = vec![-10.0, 0.0, 10.0, 20.0, 30.0];
        cfg
    }

    /// Resolves a named preset (`reference`, `mini`) or reads a JSON file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "reference" | "default" => Ok(Self::reference()),
            "mini" | "miniature" => Ok(Self::miniature()),
            path => Self::from_file(path),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SystemConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn wavelength_m(&self) -> f64 {
        self.system.light_speed_mps / self.system.frequency_hz
    }

    pub fn geometry(&self) -> GeometryConfig {
        let lambda = self.wavelength_m();
        GeometryConfig {
            frequency_hz: self.system.frequency_hz,
            wavelength_m: lambda,
            light_speed_mps: self.system.light_speed_mps,
            unit_spacing_m: self.sim.unit_spacing_wavelengths * lambda,
            layer_spacing_m: self.sim.layer_spacing_wavelengths * lambda,
            terminals: self.sim.terminals.clone(),
        }
    }

    /// Total bits per joint symbol, `N1 + N2`.
    pub fn total_bits(&self) -> usize {
        self.system.bits[0] + self.system.bits[1]
    }

    /// Linear receiver noise power in watts.
    pub fn noise_power_w(&self) -> f64 {
        dbm_to_watts(self.channel.noise_dbm)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if !(s.frequency_hz > 0.0) || !(s.light_speed_mps > 0.0) {
            return Err(Error::InvalidConfig(
                "frequency and light speed must be positive".into(),
            ));
        }
        if s.bits.iter().any(|&b| b == 0) {
            return Err(Error::InvalidConfig("bit counts must be >= 1".into()));
        }
        self.geometry().validate()?;

        let c = &self.channel;
        if !(c.reference_distance_m > 0.0) {
            return Err(Error::InvalidConfig("reference distance must be > 0".into()));
        }
        if !(s.distance_m >= c.reference_distance_m) {
            return Err(Error::InvalidConfig(format!(
                "link distance {} m is below the reference distance {} m",
                s.distance_m, c.reference_distance_m
            )));
        }
        if !(c.si_distance_m > 0.0) {
            return Err(Error::InvalidConfig("SI distance must be > 0".into()));
        }
        if !(c.path_loss_exponent > 0.0) || !(c.shadowing_std_db >= 0.0) {
            return Err(Error::InvalidConfig(
                "path-loss exponent must be > 0 and shadowing std >= 0".into(),
            ));
        }
        if !c.noise_dbm.is_finite() {
            return Err(Error::InvalidConfig("noise power must be finite".into()));
        }

        let t = &self.training;
        if t.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if t.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch size must be >= 2 for batch normalization".into(),
            ));
        }
        if !(t.learning_rate > 0.0) || !(t.lr_decay > 0.0) || t.decay_interval == 0 {
            return Err(Error::InvalidConfig(
                "learning rate, decay factor and decay interval must be positive".into(),
            ));
        }
        if t.finetune_learning_rate.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::InvalidConfig("fine-tune learning rate must be > 0".into()));
        }
        if !(t.power_alpha > 0.0) || !(t.power_beta > 0.0) || !(t.power_max_dbm >= t.power_min_dbm)
        {
            return Err(Error::InvalidConfig("invalid training power distribution".into()));
        }

        let e = &self.evaluation;
        if e.monte_carlo < 1 || e.test_symbols < 1 {
            return Err(Error::InvalidConfig(
                "monte carlo count and test scale must be >= 1".into(),
            ));
        }
        if e.power_sweep_dbm.is_empty() || e.power_sweep_dbm.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("power sweep must be non-empty and finite".into()));
        }
        if e.chunk_size.is_some_and(|c| c < 2) {
            return Err(Error::InvalidConfig("evaluation chunk size must be >= 2".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SystemConfig::reference().validate().unwrap();
        SystemConfig::miniature().validate().unwrap();
    }

    #[test]
    fn partial_json_takes_defaults() {
        let cfg = SystemConfig::from_json(r#"{"system": {"bits": [4, 4]}}"#).unwrap();
        assert_eq!(cfg.system.bits, [4, 4]);
        assert_eq!(cfg.training.epochs, 2000);
        assert_eq!(cfg.sim.terminals[0].tx_units, Grid::square(9));
    }

    #[test]
    fn json_round_trip() {
        let cfg = SystemConfig::miniature();
        let back = SystemConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(SystemConfig::from_json(r#"{"system": {"bogus": 1}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = SystemConfig::miniature();
        cfg.training.batch_size = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = SystemConfig::miniature();
        cfg.sim.terminals[1].rx_units = Grid::new(0, 3);
        assert!(cfg.validate().is_err());

        let mut cfg = SystemConfig::miniature();
        cfg.sim.unit_spacing_wavelengths = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn wavelength_consistent() {
        let g = SystemConfig::reference().geometry();
        assert!((g.frequency_hz * g.wavelength_m - g.light_speed_mps).abs() < 1e-6);
        // 28 GHz is about 10.7 mm
        assert!((g.wavelength_m - 0.0107).abs() < 1e-4);
        let mut bad = g.clone();
        bad.wavelength_m = 0.0107;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noise_conversion() {
        assert!((dbm_to_watts(-110.0) / 1e-14 - 1.0).abs() < 1e-12);
        assert!((watts_to_dbm(1.0) - 30.0).abs() < 1e-12);
    }
}
