//! Bit error rate, Monte Carlo evaluation over channel realizations, the
//! conventional (no metasurface) baseline, sweeps and report emission.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::Graph;
use crate::channel::{aperture_correlation, ChannelMode, ChannelModel, ChannelRealization};
use crate::config::{Grid, SystemConfig};
use crate::emnn::{hard_decision, BitBlock, ChannelTensors, Emnn, EmnnParams, Mode};
use crate::error::{Error, Result};
use crate::rng::{realization_seed, stream, Purpose};
use crate::training::{finetune, train_base, Checkpoint};
use crate::wavefield::{rx_propagation, tx_propagation, ComplexMatrix, SimOperator, Side};

/// Error count over a number of tested bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BerCount {
    pub errors: u64,
    pub bits: u64,
}

impl BerCount {
    pub fn ratio(&self) -> f64 {
        if self.bits == 0 {
            f64::NAN
        } else {
            self.errors as f64 / self.bits as f64
        }
    }

    pub fn merge(&mut self, other: BerCount) {
        self.errors += other.errors;
        self.bits += other.bits;
    }
}

/// Mismatches between transmitted and decided bits.
pub fn ber(b: &[u8], b_hat: &[u8]) -> Result<BerCount> {
    if b.len() != b_hat.len() {
        return Err(Error::InvalidArgument(format!(
            "{} transmitted vs {} decided bits",
            b.len(),
            b_hat.len()
        )));
    }
    let errors = b.iter().zip(b_hat).filter(|(x, y)| x != y).count() as u64;
    Ok(BerCount {
        errors,
        bits: b.len() as u64,
    })
}

/// BER of `model` on a realization at a fixed transmit power, with
/// batchnorm in evaluation mode and receiver noise on.
pub fn evaluate(
    model: &Checkpoint,
    real: &ChannelRealization,
    power_dbm: f64,
    symbols: usize,
    seed: u64,
) -> Result<BerCount> {
    let cfg = &model.config;
    let net = Emnn::new(cfg)?;
    model
        .params
        .check_against(&net.arch, cfg.training.trainable_power)?;
    let ch = ChannelTensors::new(real, &net.arch)?;
    let chunk = cfg
        .evaluation
        .chunk_size
        .unwrap_or(cfg.training.batch_size)
        .max(1);
    let mut bit_rng = stream(seed, Purpose::Eval);
    let mut noise_rng = stream(seed, Purpose::Noise);
    let total_bits = cfg.total_bits();
    let mut count = BerCount::default();
    let mut done = 0;
    while done < symbols {
        let n = chunk.min(symbols - done);
        let block = BitBlock::random(n, total_bits, power_dbm, &mut bit_rng);
        let mut g = Graph::new();
        let vars = model.params.register(&mut g);
        let fp = net.forward(
            &mut g,
            &vars,
            &model.params,
            &block,
            &ch,
            Some(&mut noise_rng),
            Mode::Eval,
        )?;
        let decided = hard_decision(g.value(fp.soft).data());
        let sent: Vec<u8> = block.bits.data().iter().map(|&b| b as u8).collect();
        count.merge(ber(&sent, &decided)?);
        done += n;
    }
    Ok(count)
}

/// One line of a report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub power_dbm: f64,
    pub realization: usize,
    pub seed: u64,
    pub bits: u64,
    pub errors: u64,
    /// `errors / bits`; NaN for failed rows.
    pub ber: f64,
    /// Failure description when fine-tuning or training did not finish.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ReportRow {
    fn key(&self) -> (String, usize, i64) {
        (
            self.label.clone(),
            self.realization,
            (self.power_dbm * 1e6).round() as i64,
        )
    }
}

/// Per-(label, power) statistics over realizations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub label: String,
    pub power_dbm: f64,
    pub realizations: usize,
    pub failures: usize,
    pub mean_ber: f64,
    pub median_ber: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BerReport {
    pub rows: Vec<ReportRow>,
    /// Digest of the configuration behind each label.
    pub digests: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Summary<'a> {
    aggregates: Vec<Aggregate>,
    config_digests: &'a BTreeMap<String, String>,
    failures: Vec<&'a ReportRow>,
}

impl BerReport {
    pub fn sort(&mut self) {
        self.rows.sort_by_key(|r| r.key());
    }

    pub fn extend(&mut self, other: BerReport) {
        self.rows.extend(other.rows);
        self.digests.extend(other.digests);
        self.sort();
    }

    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.rows.iter().map(|r| r.label.clone()).collect();
        l.dedup();
        l.sort();
        l.dedup();
        l
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<(String, i64), (f64, Vec<f64>, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = groups
                .entry((r.label.clone(), (r.power_dbm * 1e6).round() as i64))
                .or_insert((r.power_dbm, Vec::new(), 0));
            if r.failure.is_some() {
                e.2 += 1;
            } else {
                e.1.push(r.ber);
            }
        }
        groups
            .into_iter()
            .map(|((label, _), (power, bers, failures))| Aggregate {
                label,
                power_dbm: power,
                realizations: bers.len(),
                failures,
                mean_ber: if bers.is_empty() {
                    f64::NAN
                } else {
                    bers.iter().sum::<f64>() / bers.len() as f64
                },
                median_ber: median(&bers),
            })
            .collect()
    }

    /// Median BER of `label` at `power_dbm`.
    pub fn median_at(&self, label: &str, power_dbm: f64) -> Option<f64> {
        self.aggregates()
            .into_iter()
            .find(|a| a.label == label && (a.power_dbm - power_dbm).abs() < 1e-9)
            .map(|a| a.median_ber)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "power_dbm", "realization", "seed", "bits", "errors", "ber"])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.power_dbm.to_string(),
                r.realization.to_string(),
                r.seed.to_string(),
                r.bits.to_string(),
                r.errors.to_string(),
                r.ber.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("ascii csv"))
    }

    pub fn summary_json(&self) -> String {
        let s = Summary {
            aggregates: self.aggregates(),
            config_digests: &self.digests,
            failures: self.rows.iter().filter(|r| r.failure.is_some()).collect(),
        };
        // NaN is not valid JSON; serde_json writes null for it
        serde_json::to_string_pretty(&s).expect("summary serializes")
    }
}

fn failed_rows(label: &str, powers: &[f64], realization: usize, seed: u64, why: &str) -> Vec<ReportRow> {
    powers
        .iter()
        .map(|&p| ReportRow {
            label: label.to_string(),
            power_dbm: p,
            realization,
            seed,
            bits: 0,
            errors: 0,
            ber: f64::NAN,
            failure: Some(why.to_string()),
        })
        .collect()
}

/// Fine-tunes `base` on realization `index` and evaluates it over the power
/// sweep. The rows' seed reproduces them.
pub fn run_realization(base: &Checkpoint, label: &str, index: usize) -> Result<Vec<ReportRow>> {
    let cfg = &base.config;
    let ev = &cfg.evaluation;
    let seed = realization_seed(ev.seed, index as u64);
    let model = ChannelModel::new(cfg)?;
    let real = model.realize(seed, ChannelMode::Instantaneous)?;
    let tuned = finetune(base, &real, None, None)?;
    if let Some(why) = &tuned.diverged {
        return Ok(failed_rows(label, &ev.power_sweep_dbm, index, seed, why));
    }
    ev.power_sweep_dbm
        .iter()
        .map(|&p| {
            let c = evaluate(&tuned, &real, p, ev.test_symbols, seed)?;
            Ok(ReportRow {
                label: label.to_string(),
                power_dbm: p,
                realization: index,
                seed,
                bits: c.bits,
                errors: c.errors,
                ber: c.ratio(),
                failure: None,
            })
        })
        .collect()
}

/// Fine-tune and evaluate `base` on every Monte Carlo realization, in
/// parallel; rows come back sorted.
pub fn monte_carlo_eval(base: &Checkpoint, label: &str) -> Result<BerReport> {
    let ev = &base.config.evaluation;
    let per: Vec<Result<Vec<ReportRow>>> = (0..ev.monte_carlo)
        .into_par_iter()
        .map(|i| match run_realization(base, label, i) {
            Err(Error::Diverged { reason, .. }) => Ok(failed_rows(
                label,
                &ev.power_sweep_dbm,
                i,
                realization_seed(ev.seed, i as u64),
                &reason,
            )),
            other => other,
        })
        .collect();
    let mut report = BerReport::default();
    for r in per {
        report.rows.extend(r?);
    }
    report.digests.insert(label.to_string(), base.config.digest());
    report.sort();
    Ok(report)
}

/// Re-runs the realization behind `row`; the returned row is identical when
/// the pipeline is deterministic.
pub fn reproduce_row(base: &Checkpoint, row: &ReportRow) -> Result<ReportRow> {
    let rows = run_realization(base, &row.label, row.realization)?;
    rows.into_iter()
        .find(|r| (r.power_dbm - row.power_dbm).abs() < 1e-9)
        .ok_or_else(|| Error::InvalidArgument(format!("power {} not in sweep", row.power_dbm)))
}

/// The same system with every metasurface stage removed, so antennas couple
/// directly through the channel.
pub fn baseline_conventional(config: &SystemConfig) -> SystemConfig {
    let mut c = config.clone();
    for t in c.sim.terminals.iter_mut() {
        t.tx_layers = 0;
        t.rx_layers = 0;
    }
    c
}

/// Base training followed by Monte Carlo fine-tune/evaluate.
pub fn pipeline(config: &SystemConfig, label: &str) -> Result<BerReport> {
    let base = train_base(config)?;
    if let Some(why) = &base.diverged {
        let ev = &config.evaluation;
        let mut r = BerReport::default();
        for i in 0..ev.monte_carlo {
            r.rows.extend(failed_rows(
                label,
                &ev.power_sweep_dbm,
                i,
                realization_seed(ev.seed, i as u64),
                &format!("base training: {why}"),
            ));
        }
        r.digests.insert(label.to_string(), config.digest());
        return Ok(r);
    }
    monte_carlo_eval(&base, label)
}

/// What a sweep varies.
#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    /// Metasurface layer count `L = K` on both terminals.
    Layers(Vec<usize>),
    /// Square unit grid side on every metasurface layer.
    Units(Vec<usize>),
    /// Bits per symbol `(N1, N2)`.
    Bits(Vec<[usize; 2]>),
    /// Transmit power points in dBm, one model.
    Power(Vec<f64>),
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: Vec<String>| v.join(",");
        match self {
            Sweep::Layers(v) => write!(f, "layers:{}", join(v.iter().map(|x| x.to_string()).collect())),
            Sweep::Units(v) => write!(f, "units:{}", join(v.iter().map(|x| x.to_string()).collect())),
            Sweep::Bits(v) => write!(
                f,
                "bits:{}",
                join(v.iter().map(|b| format!("{}+{}", b[0], b[1])).collect())
            ),
            Sweep::Power(v) => write!(f, "power:{}", join(v.iter().map(|x| x.to_string()).collect())),
        }
    }
}

impl FromStr for Sweep {
    type Err = Error;

    /// `layers:1,3`, `units:4,6`, `bits:4+4,8+8` (or `bits:4,8` for equal
    /// counts), `power:-10,0,10`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse sweep '{s}'"));
        let (kind, values) = s.split_once(':').ok_or_else(bad)?;
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|x| !x.is_empty()).collect();
        if items.is_empty() {
            return Err(bad());
        }
        let ints = || -> Result<Vec<usize>> {
            items.iter().map(|x| x.parse().map_err(|_| bad())).collect()
        };
        match kind {
            "layers" => Ok(Sweep::Layers(ints()?)),
            "units" => Ok(Sweep::Units(ints()?)),
            "bits" => items
                .iter()
                .map(|x| match x.split_once('+') {
                    Some((a, b)) => Ok([a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?]),
                    None => {
                        let n = x.parse().map_err(|_| bad())?;
                        Ok([n, n])
                    }
                })
                .collect::<Result<Vec<_>>>()
                .map(Sweep::Bits),
            "power" => items
                .iter()
                .map(|x| x.parse().map_err(|_| bad()))
                .collect::<Result<Vec<f64>>>()
                .map(Sweep::Power),
            _ => Err(bad()),
        }
    }
}

impl Sweep {
    /// Derived configurations with their labels.
    pub fn points(&self, base: &SystemConfig) -> Result<Vec<(String, SystemConfig)>> {
        let mut out = Vec::new();
        match self {
            Sweep::Layers(v) => {
                for &l in v {
                    let mut c = base.clone();
                    for t in c.sim.terminals.iter_mut() {
                        t.tx_layers = l;
                        t.rx_layers = l;
                    }
                    out.push((format!("layers={l}"), c));
                }
            }
            Sweep::Units(v) => {
                for &n in v {
                    let mut c = base.clone();
                    for t in c.sim.terminals.iter_mut() {
                        t.tx_units = Grid::square(n);
                        t.rx_units = Grid::square(n);
                    }
                    out.push((format!("units={n}x{n}"), c));
                }
            }
            Sweep::Bits(v) => {
                for b in v {
                    let mut c = base.clone();
                    c.system.bits = *b;
                    out.push((format!("bits={}+{}", b[0], b[1]), c));
                }
            }
            Sweep::Power(v) => {
                let mut c = base.clone();
                c.evaluation.power_sweep_dbm = v.clone();
                out.push(("power".to_string(), c));
            }
        }
        for (label, c) in &out {
            c.validate()
                .map_err(|e| Error::InvalidConfig(format!("sweep point {label}: {e}")))?;
        }
        Ok(out)
    }
}

/// Runs the full pipeline for every sweep point. A point whose training
/// fails with a runtime error is recorded as failed rows and the sweep
/// continues.
pub fn run_sweep(sweep: &Sweep, base: &SystemConfig) -> Result<BerReport> {
    let mut report = BerReport::default();
    for (label, cfg) in sweep.points(base)? {
        log::info!("sweep point {label}");
        match pipeline(&cfg, &label) {
            Ok(r) => report.extend(r),
            Err(e @ (Error::InvalidConfig(_) | Error::Io(_))) => return Err(e),
            Err(e) => {
                let ev = &cfg.evaluation;
                for i in 0..ev.monte_carlo {
                    report.rows.extend(failed_rows(
                        &label,
                        &ev.power_sweep_dbm,
                        i,
                        realization_seed(ev.seed, i as u64),
                        &e.to_string(),
                    ));
                }
                report.digests.insert(label.clone(), cfg.digest());
            }
        }
    }
    report.sort();
    Ok(report)
}

/// Named matrices for audit: per terminal the dense `T_q` and `R_q` under
/// the given phases (zero phases without a model) and the transmit/receive
/// aperture correlations.
pub fn physics_matrices(
    config: &SystemConfig,
    params: Option<&EmnnParams>,
) -> Result<Vec<(String, ComplexMatrix)>> {
    config.validate()?;
    let geo = config.geometry();
    let mut out = Vec::new();
    for (q, t) in geo.terminals.iter().enumerate() {
        let n = q + 1;
        for side in [Side::Tx, Side::Rx] {
            let mut sim = SimOperator::build(&geo, q, side)?;
            if let Some(p) = params {
                sim.set_phases(p.phases(q, side))?;
            }
            let (name, m) = match side {
                Side::Tx => ("T", tx_propagation(&sim, t.tx_antennas.count())?),
                Side::Rx => ("R", rx_propagation(&sim, t.rx_antennas.count())?),
            };
            out.push((format!("{name}{n}"), m));
        }
        for (name, grid) in [("corr_tx", t.tx_aperture_grid()), ("corr_rx", t.rx_aperture_grid())] {
            let r = aperture_correlation(grid, geo.unit_spacing_m, geo.wavelength_m)?;
            out.push((format!("{name}{n}"), r.to_complex()));
        }
    }
    Ok(out)
}

/// `row,col,re,im` listing of every entry.
pub fn matrix_csv(m: &ComplexMatrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "col", "re", "im"])?;
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let v = m.get(r, c);
            w.write_record([r.to_string(), c.to_string(), v.re.to_string(), v.im.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}
