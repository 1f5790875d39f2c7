//! End-to-end network: TX-DNN, power control, TX-SIM, channel, RX-SIM and
//! RX-DNN for both terminals in one graph.
//!
//! Terminal indices are 0-based in code and 1-based in parameter names
//! (`t1.*`, `t2.*`). Terminal `q` decodes the bits of its peer `p`, and the
//! soft output is ordered `[b̂ at terminal 2, b̂ at terminal 1]`, i.e. aligned
//! with the transmitted block `[b1, b2]`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchStats, Graph, Tensor, Var};
use crate::channel::ChannelRealization;
use crate::config::{dbm_to_watts, SystemConfig};
use crate::error::{shape_err, Error, Result};
use crate::training::xavier_init;
use crate::wavefield::{ComplexMatrix, Side, SimOperator};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
/// Initial value of every DNN bias; positive so ReLU units start alive.
pub const BIAS_INIT: f64 = 1.0;
pub const POWER_EPS: f64 = 1e-12;

/// Layer widths of one terminal, in real (paired) units where complex.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TerminalArch {
    /// Bits sent by this terminal.
    pub bits_in: usize,
    /// Input width followed by the three TX-DNN layer widths.
    pub tx_dnn: Vec<usize>,
    /// Output width of each TX-SIM metasurface layer.
    pub tx_sim: Vec<usize>,
    /// Width of the field arriving at the outermost RX layer.
    pub channel_out: usize,
    /// Output width after each RX-SIM transmission, outermost first.
    pub rx_sim: Vec<usize>,
    /// Input width followed by the widths after each RX-DNN linear layer
    /// and the sigmoid.
    pub rx_dnn: Vec<usize>,
    /// Bits decoded here (the peer's bit count).
    pub bits_out: usize,
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    pub tx_aperture: usize,
    pub rx_aperture: usize,
}

impl TerminalArch {
    /// `(row label, output width)` in network order.
    pub fn rows(&self) -> Vec<(String, usize)> {
        let mut rows = vec![("input bits".to_string(), self.bits_in)];
        for (i, w) in self.tx_dnn.iter().skip(1).enumerate() {
            rows.push((format!("tx linear+relu {}", i + 1), *w));
        }
        rows.push(("power control".into(), *self.tx_dnn.last().unwrap()));
        for (l, w) in self.tx_sim.iter().enumerate() {
            rows.push((format!("tx transmission {}", l + 1), *w));
            rows.push((format!("tx metasurface {}", l + 1), *w));
        }
        rows.push(("channel".into(), self.channel_out));
        let k = self.rx_sim.len();
        for (i, w) in self.rx_sim.iter().enumerate() {
            rows.push((format!("rx metasurface {}", k - i), if i == 0 { self.channel_out } else { self.rx_sim[i - 1] }));
            rows.push((format!("rx transmission {}", k - i), *w));
        }
        rows.push(("rx batchnorm 1".into(), self.rx_dnn[0]));
        rows.push(("rx linear+relu 1".into(), self.rx_dnn[1]));
        rows.push(("rx batchnorm 2".into(), self.rx_dnn[1]));
        rows.push(("rx linear+relu 2".into(), self.rx_dnn[2]));
        rows.push(("rx batchnorm 3".into(), self.rx_dnn[2]));
        rows.push(("sigmoid".into(), self.rx_dnn[3]));
        rows
    }
}

/// Layer-size schedule for both terminals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmnnArchitecture {
    pub terminals: [TerminalArch; 2],
}

impl EmnnArchitecture {
    pub fn build(config: &SystemConfig) -> Result<Self> {
        let bits = config.system.bits;
        let mut out = Vec::with_capacity(2);
        for q in 0..2 {
            let p = 1 - q;
            let t = &config.sim.terminals[q];
            if bits[q] == 0 {
                return Err(Error::InvalidConfig(format!("terminal {} sends no bits", q + 1)));
            }
            let (at, ar) = (t.tx_antennas.count(), t.rx_antennas.count());
            let (m, n) = (t.tx_units.count(), t.rx_units.count());
            let mut rx_sim = Vec::with_capacity(t.rx_layers);
            for k in (1..=t.rx_layers).rev() {
                rx_sim.push(if k == 1 { 2 * ar } else { 2 * n });
            }
            out.push(TerminalArch {
                bits_in: bits[q],
                tx_dnn: vec![bits[q], bits[q], bits[q], 2 * at],
                tx_sim: vec![2 * m; t.tx_layers],
                channel_out: 2 * t.rx_aperture(),
                rx_sim,
                rx_dnn: vec![2 * ar, bits[p], bits[p], bits[p]],
                bits_out: bits[p],
                tx_antennas: at,
                rx_antennas: ar,
                tx_aperture: t.tx_aperture(),
                rx_aperture: t.rx_aperture(),
            });
        }
        let [a, b]: [TerminalArch; 2] = out.try_into().unwrap();
        let arch = Self { terminals: [a, b] };
        arch.check()?;
        Ok(arch)
    }

    fn check(&self) -> Result<()> {
        for (q, t) in self.terminals.iter().enumerate() {
            let fail = |row: &str| {
                Err(Error::InvalidConfig(format!("terminal {} row '{row}' inconsistent", q + 1)))
            };
            if t.tx_dnn.len() != 4 || t.tx_dnn[3] != 2 * t.tx_antennas {
                return fail("tx linear+relu 3");
            }
            let sim_out = t.tx_sim.last().copied().unwrap_or(2 * t.tx_antennas);
            if sim_out != 2 * t.tx_aperture {
                return fail("tx metasurface");
            }
            let rx_in = t.rx_sim.last().copied().unwrap_or(t.channel_out);
            if rx_in != t.rx_dnn[0] || t.rx_dnn[0] != 2 * t.rx_antennas {
                return fail("rx batchnorm 1");
            }
            if *t.rx_dnn.last().unwrap() != t.bits_out {
                return fail("sigmoid");
            }
        }
        Ok(())
    }

    pub fn total_bits(&self) -> usize {
        self.terminals[0].bits_in + self.terminals[1].bits_in
    }
}

impl fmt::Display for EmnnArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (q, t) in self.terminals.iter().enumerate() {
            writeln!(f, "terminal {}", q + 1)?;
            for (label, w) in t.rows() {
                writeln!(f, "  {label:<22} {w}")?;
            }
        }
        Ok(())
    }
}

/// Trainable tensors plus non-trainable buffers (batchnorm running
/// statistics), keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct EmnnParams {
    pub tensors: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

/// Whether AdamW applies weight decay to a parameter: linear weights only.
pub fn decays(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|leaf| leaf.starts_with('w'))
}

fn tname(q: usize, rest: &str) -> String {
    format!("t{}.{rest}", q + 1)
}

impl EmnnParams {
    pub fn init(arch: &EmnnArchitecture, trainable_power: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut tensors = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for (q, t) in arch.terminals.iter().enumerate() {
            for i in 0..3 {
                let (fi, fo) = (t.tx_dnn[i], t.tx_dnn[i + 1]);
                tensors.insert(tname(q, &format!("tx.w{i}")), xavier_init(fo, fi, rng));
                tensors.insert(tname(q, &format!("tx.b{i}")), Tensor::full(&[1, fo], BIAS_INIT));
            }
            for (l, w) in t.tx_sim.iter().enumerate() {
                tensors.insert(tname(q, &format!("theta{}", l + 1)), random_phases(w / 2, rng));
            }
            let k_layers = t.rx_sim.len();
            for k in 1..=k_layers {
                tensors.insert(tname(q, &format!("xi{k}")), random_phases(t.rx_aperture, rng));
            }
            for i in 0..2 {
                let (fi, fo) = (t.rx_dnn[i], t.rx_dnn[i + 1]);
                tensors.insert(tname(q, &format!("rx.w{i}")), xavier_init(fo, fi, rng));
                tensors.insert(tname(q, &format!("rx.b{i}")), Tensor::full(&[1, fo], BIAS_INIT));
            }
            for i in 0..3 {
                let w = t.rx_dnn[i];
                tensors.insert(tname(q, &format!("rx.bn{i}.gamma")), Tensor::full(&[1, w], 1.0));
                tensors.insert(tname(q, &format!("rx.bn{i}.beta")), Tensor::zeros(&[1, w]));
                buffers.insert(tname(q, &format!("rx.bn{i}.mean")), Tensor::zeros(&[1, w]));
                buffers.insert(tname(q, &format!("rx.bn{i}.var")), Tensor::full(&[1, w], 1.0));
            }
        }
        if trainable_power {
            let n = arch.terminals[0].tx_antennas + arch.terminals[1].tx_antennas;
            tensors.insert("power.logits".into(), Tensor::zeros(&[1, n]));
        }
        Self { tensors, buffers }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor '{name}'")))
    }

    /// Registers every trainable tensor as a graph parameter.
    pub fn register(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t.clone())))
            .collect()
    }

    /// Verifies that every tensor has the shape the architecture requires.
    pub fn check_against(&self, arch: &EmnnArchitecture, trainable_power: bool) -> Result<()> {
        let reference = Self::init(arch, trainable_power, &mut rand::SeedableRng::seed_from_u64(0));
        for (which, mine, want) in [
            ("parameter", &self.tensors, &reference.tensors),
            ("buffer", &self.buffers, &reference.buffers),
        ] {
            for (k, t) in want {
                match mine.get(k) {
                    None => {
                        return Err(Error::IncompatibleCheckpoint(format!("missing {which} '{k}'")))
                    }
                    Some(m) if m.shape() != t.shape() => {
                        return Err(Error::IncompatibleCheckpoint(format!(
                            "{which} '{k}' has shape {:?}, architecture needs {:?}",
                            m.shape(),
                            t.shape()
                        )))
                    }
                    _ => {}
                }
            }
            if let Some(extra) = mine.keys().find(|k| !want.contains_key(*k)) {
                return Err(Error::IncompatibleCheckpoint(format!("unexpected {which} '{extra}'")));
            }
        }
        Ok(())
    }

    /// Phase vectors of one stack in layer order (`θ^1..` or `ξ^1..`).
    pub fn phases(&self, q: usize, side: Side) -> Vec<Vec<f64>> {
        let prefix = match side {
            Side::Tx => "theta",
            Side::Rx => "xi",
        };
        (1..)
            .map_while(|l| self.tensors.get(&tname(q, &format!("{prefix}{l}"))))
            .map(|t| t.data().to_vec())
            .collect()
    }

    /// Hardware-facing phase table: `terminal side layer unit phase` with
    /// phases wrapped to `[0, 2π)`.
    pub fn phase_table(&self) -> String {
        let mut out = String::from("terminal\tside\tlayer\tunit\tphase_rad\n");
        for q in 0..2 {
            for side in [Side::Tx, Side::Rx] {
                for (l, layer) in self.phases(q, side).iter().enumerate() {
                    for (u, &p) in layer.iter().enumerate() {
                        let s = if side == Side::Tx { "tx" } else { "rx" };
                        out.push_str(&format!(
                            "{}\t{s}\t{}\t{u}\t{:.17}\n",
                            q + 1,
                            l + 1,
                            crate::wavefield::wrap_phase(p)
                        ));
                    }
                }
            }
        }
        out
    }

    /// Folds batch statistics into the running estimates:
    /// `running = momentum * running + (1 - momentum) * batch`, with the
    /// unbiased batch variance.
    pub fn update_running(&mut self, stats: &[(String, BatchStats)], momentum: f64) {
        for (name, s) in stats {
            let unbias = s.batch as f64 / (s.batch as f64 - 1.0);
            if let Some(m) = self.buffers.get_mut(&format!("{name}.mean")) {
                for (r, b) in m.data_mut().iter_mut().zip(&s.mean) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
            if let Some(v) = self.buffers.get_mut(&format!("{name}.var")) {
                for (r, b) in v.data_mut().iter_mut().zip(&s.var) {
                    *r = momentum * *r + (1.0 - momentum) * b * unbias;
                }
            }
        }
    }
}

fn random_phases(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::row(
        (0..n)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect(),
    )
}

/// A batch of transmitted bits with the total transmit power of each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BitBlock {
    /// `[batch, N1 + N2]`, values in {0, 1}: `b1` then `b2`.
    pub bits: Tensor,
    pub power_dbm: Vec<f64>,
}

impl BitBlock {
    pub fn new(bits: Tensor, power_dbm: Vec<f64>) -> Result<Self> {
        if bits.shape().len() != 2 || bits.rows() != power_dbm.len() {
            return Err(shape_err(
                "BitBlock",
                format!("bits {:?} with {} powers", bits.shape(), power_dbm.len()),
            ));
        }
        if bits.data().iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(Error::InvalidArgument("bits must be 0 or 1".into()));
        }
        Ok(Self { bits, power_dbm })
    }

    pub fn batch(&self) -> usize {
        self.bits.rows()
    }

    /// Uniform random bits at a single power level.
    pub fn random(batch: usize, total_bits: usize, power_dbm: f64, rng: &mut ChaCha8Rng) -> Self {
        let bits = (0..batch * total_bits)
            .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
            .collect();
        Self {
            bits: Tensor::matrix(batch, total_bits, bits).unwrap(),
            power_dbm: vec![power_dbm; batch],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm uses batch statistics.
    Train,
    /// Batchnorm uses running statistics.
    Eval,
}

/// Links of a realization converted to `[2, rows, cols]` tensors.
#[derive(Clone, Debug)]
pub struct ChannelTensors {
    links: [[Tensor; 2]; 2],
}

pub fn complex_tensor(m: &ComplexMatrix) -> Tensor {
    let mut data = Vec::with_capacity(2 * m.rows() * m.cols());
    data.extend_from_slice(m.re());
    data.extend_from_slice(m.im());
    Tensor::new(vec![2, m.rows(), m.cols()], data).expect("consistent complex matrix")
}

impl ChannelTensors {
    pub fn new(real: &ChannelRealization, arch: &EmnnArchitecture) -> Result<Self> {
        for p in 0..2 {
            for q in 0..2 {
                let want = (arch.terminals[q].rx_aperture, arch.terminals[p].tx_aperture);
                if real.link(p, q).shape() != want {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "link {}->{} has shape {:?}, network needs {:?}",
                        p + 1,
                        q + 1,
                        real.link(p, q).shape(),
                        want
                    )));
                }
            }
        }
        let t = |p: usize, q: usize| complex_tensor(real.link(p, q));
        Ok(Self {
            links: [[t(0, 0), t(0, 1)], [t(1, 0), t(1, 1)]],
        })
    }
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// Soft estimates `[batch, N1 + N2]` aligned with the transmitted bits.
    pub soft: Var,
    /// Batch statistics of every batchnorm layer (train mode only), keyed by
    /// the layer name without the `.mean`/`.var` suffix.
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// The network with its fixed physical layers.
#[derive(Clone, Debug)]
pub struct Emnn {
    pub arch: EmnnArchitecture,
    /// `[terminal][layer]` V^l as `[2, out, in]` tensors.
    tx_layers: [Vec<Tensor>; 2],
    /// `[terminal][k-1]` U^k as `[2, out, in]` tensors.
    rx_layers: [Vec<Tensor>; 2],
    pub noise_power_w: f64,
    /// Fixed receiver front-end gain, `1/σ` of the configured noise floor.
    pub rx_gain: f64,
    pub trainable_power: bool,
}

impl Emnn {
    pub fn new(config: &SystemConfig) -> Result<Self> {
        config.validate()?;
        let arch = EmnnArchitecture::build(config)?;
        let geo = config.geometry();
        let mut tx: Vec<Vec<Tensor>> = Vec::new();
        let mut rx: Vec<Vec<Tensor>> = Vec::new();
        for q in 0..2 {
            let ts = SimOperator::build(&geo, q, Side::Tx)?;
            let rs = SimOperator::build(&geo, q, Side::Rx)?;
            tx.push(ts.transmissions.iter().map(complex_tensor).collect());
            rx.push(rs.transmissions.iter().map(complex_tensor).collect());
        }
        let noise = config.noise_power_w();
        let [t0, t1]: [Vec<Tensor>; 2] = tx.try_into().unwrap();
        let [r0, r1]: [Vec<Tensor>; 2] = rx.try_into().unwrap();
        Ok(Self {
            arch,
            tx_layers: [t0, t1],
            rx_layers: [r0, r1],
            noise_power_w: noise,
            rx_gain: if noise > 0.0 { 1.0 / noise.sqrt() } else { 1.0 },
            trainable_power: config.training.trainable_power,
        })
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> EmnnParams {
        EmnnParams::init(&self.arch, self.trainable_power, rng)
    }

    fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter '{name}'")))
    }

    /// Three linear+ReLU layers; output is the raw paired antenna signal.
    pub fn tx_dnn_forward(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        q: usize,
        bits: Var,
    ) -> Result<Var> {
        let mut h = bits;
        for i in 0..3 {
            let w = Self::var(vars, &tname(q, &format!("tx.w{i}")))?;
            let b = Self::var(vars, &tname(q, &format!("tx.b{i}")))?;
            h = g.linear(h, w, b)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    /// Per-antenna amplitude factors `[1, 2A]` (paired) for terminal `q`.
    fn power_shares(&self, g: &mut Graph, vars: &BTreeMap<String, Var>, q: usize) -> Result<Var> {
        let a = [self.arch.terminals[0].tx_antennas, self.arch.terminals[1].tx_antennas];
        if self.trainable_power {
            let logits = Self::var(vars, "power.logits")?;
            let share = g.softmax(logits)?;
            let amp = g.sqrt(share);
            let start = if q == 0 { 0 } else { a[0] };
            let mine = g.slice(amp, start, a[q])?;
            g.concat(&[mine, mine])
        } else {
            // equal split between terminals, uniform over antennas
            let amp = (0.5 / a[q] as f64).sqrt();
            Ok(g.constant(Tensor::row(vec![amp; 2 * a[q]])))
        }
    }

    /// Normalizes every antenna stream to unit mean power over the batch and
    /// scales it so the per-sample total over both terminals is `P^t`.
    pub fn power_control(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        q: usize,
        raw: Var,
        power_dbm: &[f64],
    ) -> Result<Var> {
        let x = g.power_normalize(raw, POWER_EPS)?;
        let amp: Vec<f64> = power_dbm.iter().map(|&p| dbm_to_watts(p).sqrt()).collect();
        let amp = g.constant(Tensor::matrix(amp.len(), 1, amp)?);
        let x = g.hadamard(x, amp)?;
        let share = self.power_shares(g, vars, q)?;
        g.hadamard(x, share)
    }

    /// Alternates `V^l` and `θ^l` for `l = 1..L`.
    pub fn tx_sim_forward(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        q: usize,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for (l, v) in self.tx_layers[q].iter().enumerate() {
            let vc = g.constant(v.clone());
            h = g.complex_matmul(vc, h)?;
            let theta = Self::var(vars, &tname(q, &format!("theta{}", l + 1)))?;
            h = g.phase_diag_apply(theta, h)?;
        }
        Ok(h)
    }

    /// Applies `ξ^K, U^K, …, ξ^1, U^1` to the field at the outermost layer.
    pub fn rx_sim_forward(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        q: usize,
        field: Var,
    ) -> Result<Var> {
        let mut h = field;
        for (k, u) in self.rx_layers[q].iter().enumerate().rev() {
            let xi = Self::var(vars, &tname(q, &format!("xi{}", k + 1)))?;
            h = g.phase_diag_apply(xi, h)?;
            let uc = g.constant(u.clone());
            h = g.complex_matmul(uc, h)?;
        }
        Ok(h)
    }

    /// `field_q = G_pq s_p + G_qq s_q` for both receivers.
    pub fn channel_layer(&self, g: &mut Graph, s: [Var; 2], ch: &ChannelTensors) -> Result<[Var; 2]> {
        let mut out = [s[0]; 2];
        for (q, slot) in out.iter_mut().enumerate() {
            let p = 1 - q;
            let gpq = g.constant(ch.links[p][q].clone());
            let gqq = g.constant(ch.links[q][q].clone());
            let cross = g.complex_matmul(gpq, s[p])?;
            let si = g.complex_matmul(gqq, s[q])?;
            *slot = g.add(cross, si)?;
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        params: &EmnnParams,
        name: String,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let gamma = Self::var(vars, &format!("{name}.gamma"))?;
        let beta = Self::var(vars, &format!("{name}.beta"))?;
        match mode {
            Mode::Train => {
                let (y, s) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
                stats.push((name, s));
                Ok(y)
            }
            Mode::Eval => {
                let m = params.get(&format!("{name}.mean"))?.data().to_vec();
                let v = params.get(&format!("{name}.var"))?.data().to_vec();
                g.batchnorm_eval(x, gamma, beta, &m, &v, BN_EPS)
            }
        }
    }

    /// BN → linear+ReLU → BN → linear+ReLU → BN → sigmoid.
    #[allow(clippy::too_many_arguments)]
    pub fn rx_dnn_forward(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        params: &EmnnParams,
        q: usize,
        y: Var,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let mut h = y;
        for i in 0..2 {
            h = self.bn(g, vars, params, tname(q, &format!("rx.bn{i}")), h, mode, stats)?;
            let w = Self::var(vars, &tname(q, &format!("rx.w{i}")))?;
            let b = Self::var(vars, &tname(q, &format!("rx.b{i}")))?;
            h = g.linear(h, w, b)?;
            h = g.relu(h);
        }
        h = self.bn(g, vars, params, tname(q, "rx.bn2"), h, mode, stats)?;
        Ok(g.sigmoid(h))
    }

    fn draw_noise(&self, batch: usize, width: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let std = (self.noise_power_w / 2.0).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let data = (0..batch * width).map(|_| normal.sample(rng)).collect();
        Tensor::matrix(batch, width, data).unwrap()
    }

    /// Full map from bits to soft estimates. Noise is drawn from `noise` when
    /// given and omitted otherwise.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        params: &EmnnParams,
        block: &BitBlock,
        ch: &ChannelTensors,
        mut noise: Option<&mut ChaCha8Rng>,
        mode: Mode,
    ) -> Result<ForwardPass> {
        let nb = [self.arch.terminals[0].bits_in, self.arch.terminals[1].bits_in];
        if block.bits.cols() != nb[0] + nb[1] {
            return Err(shape_err(
                "forward",
                format!("bit width {} for {} + {} bits", block.bits.cols(), nb[0], nb[1]),
            ));
        }
        let batch = block.batch();
        let bits = g.constant(block.bits.clone());
        let mut s = [bits; 2];
        for q in 0..2 {
            let start = if q == 0 { 0 } else { nb[0] };
            let bq = g.slice(bits, start, nb[q])?;
            let raw = self.tx_dnn_forward(g, vars, q, bq)?;
            let x = self.power_control(g, vars, q, raw, &block.power_dbm)?;
            s[q] = self.tx_sim_forward(g, vars, q, x)?;
        }
        let fields = self.channel_layer(g, s, ch)?;
        let mut stats = Vec::new();
        let mut soft = [bits; 2];
        for q in 0..2 {
            let mut y = self.rx_sim_forward(g, vars, q, fields[q])?;
            if let Some(rng) = noise.as_deref_mut() {
                let n = self.draw_noise(batch, 2 * self.arch.terminals[q].rx_antennas, rng);
                let nv = g.constant(n);
                y = g.add(y, nv)?;
            }
            let y = g.scale(y, self.rx_gain);
            soft[q] = self.rx_dnn_forward(g, vars, params, q, y, mode, &mut stats)?;
        }
        // terminal 2 decodes b1, terminal 1 decodes b2
        let out = g.concat(&[soft[1], soft[0]])?;
        Ok(ForwardPass { soft: out, bn_stats: stats })
    }
}

/// Threshold at 0.5; exactly 0.5 maps to 1.
pub fn hard_decision(soft: &[f64]) -> Vec<u8> {
    soft.iter().map(|&v| u8::from(v >= 0.5)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelMode, ChannelModel, ChannelRealization};
    use crate::wavefield::{rx_propagation, tx_propagation};
    use num_complex::Complex64;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn reference_widths() {
        let arch = EmnnArchitecture::build(&SystemConfig::reference()).unwrap();
        let t1 = &arch.terminals[0];
        assert_eq!(t1.tx_dnn, vec![12, 12, 12, 32]);
        assert_eq!(t1.tx_sim, vec![162; 3]);
        assert_eq!(t1.channel_out, 162);
        assert_eq!(t1.rx_dnn[0], 32);
        let t2 = &arch.terminals[1];
        assert_eq!(*t2.tx_dnn.last().unwrap(), 18);
        assert_eq!(t2.rx_dnn[0], 18);
        // the decoder of terminal 1's bits sits at terminal 2
        assert_eq!(t2.bits_out, 12);
        assert_eq!(t1.bits_out, 8);
        assert_eq!(t1.rx_sim, vec![162, 162, 32]);
    }

    #[test]
    fn baseline_has_no_sim_stages() {
        let mut cfg = SystemConfig::miniature();
        for t in cfg.sim.terminals.iter_mut() {
            t.tx_layers = 0;
            t.rx_layers = 0;
        }
        let arch = EmnnArchitecture::build(&cfg).unwrap();
        assert!(arch.terminals[0].tx_sim.is_empty());
        assert_eq!(arch.terminals[0].channel_out, 2 * arch.terminals[0].rx_antennas);
        let p = EmnnParams::init(&arch, false, &mut rng(0));
        assert!(p.tensors.keys().all(|k| !k.contains("theta") && !k.contains("xi")));
    }

    #[test]
    fn hard_decision_ties_go_up() {
        assert_eq!(hard_decision(&[0.49, 0.51, 0.5, 0.0, 1.0]), vec![0, 1, 1, 0, 1]);
    }

    #[test]
    fn decay_classification() {
        assert!(decays("t1.tx.w0"));
        assert!(!decays("t1.tx.b0"));
        assert!(!decays("t1.theta1"));
        assert!(!decays("t2.rx.bn0.gamma"));
        assert!(!decays("power.logits"));
    }

    fn setup(cfg: &SystemConfig) -> (Emnn, EmnnParams) {
        let net = Emnn::new(cfg).unwrap();
        let p = net.init_params(&mut rng(1));
        (net, p)
    }

    #[test]
    fn tx_dnn_zero_weights_give_zero() {
        let (net, mut p) = setup(&SystemConfig::miniature());
        for (k, t) in p.tensors.iter_mut() {
            if k.starts_with("t1.tx.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let vars = p.register(&mut g);
        let bits = g.constant(BitBlock::random(5, 4, 0.0, &mut rng(2)).bits);
        let y = net.tx_dnn_forward(&mut g, &vars, 0, bits).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    fn paired_batch(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Tensor {
        Tensor::matrix(b, 2 * n, (0..b * 2 * n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn power_control_total_and_covariance() {
        let (net, p) = setup(&SystemConfig::miniature());
        let mut r = rng(3);
        let batch = 10_000;
        let mut g = Graph::new();
        let vars = p.register(&mut g);
        let mut total = 0.0;
        for q in 0..2 {
            let a = net.arch.terminals[q].tx_antennas;
            let raw = g.constant(paired_batch(&mut r, batch, a));
            let x = net.power_control(&mut g, &vars, q, raw, &vec![20.0; batch]).unwrap();
            let v = g.value(x);
            for i in 0..a {
                let pw: f64 = (0..batch)
                    .map(|b| v.get2(b, i).powi(2) + v.get2(b, a + i).powi(2))
                    .sum::<f64>()
                    / batch as f64;
                total += pw;
            }
        }
        let want = dbm_to_watts(20.0);
        assert!((total - want).abs() / want < 1e-9, "{total}");
    }

    #[test]
    fn power_control_unit_stream_fixed_point() {
        // streams with unit power, equal split over A_total antennas at
        // P^t = A_total watts leave each stream's amplitude unchanged
        let (net, p) = setup(&SystemConfig::miniature());
        let a_total = 8.0;
        let power_dbm = crate::config::watts_to_dbm(a_total);
        let mut g = Graph::new();
        let vars = p.register(&mut g);
        // every stream is 1 + 0j in both samples
        let raw = Tensor::matrix(2, 8, [[1.0; 4], [0.0; 4]].concat().repeat(2)).unwrap();
        let rv = g.constant(raw.clone());
        let x = net.power_control(&mut g, &vars, 0, rv, &[power_dbm; 2]).unwrap();
        for (a, b) in g.value(x).data().iter().zip(raw.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empirical_stream_covariance_is_identity() {
        let (net, p) = setup(&SystemConfig::miniature());
        let batch = 10_000;
        let block = BitBlock::random(batch, 8, 0.0, &mut rng(4));
        let mut g = Graph::new();
        let vars = p.register(&mut g);
        let bits = g.constant(block.bits.clone());
        let b1 = g.slice(bits, 0, 4).unwrap();
        let raw = net.tx_dnn_forward(&mut g, &vars, 0, b1).unwrap();
        let x = g.power_normalize(raw, POWER_EPS).unwrap();
        let v = g.value(x);
        let a = 4;
        for i in 0..a {
            let d: f64 = (0..batch)
                .map(|b| v.get2(b, i).powi(2) + v.get2(b, a + i).powi(2))
                .sum::<f64>()
                / batch as f64;
            assert!((d - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn layerwise_sim_matches_dense_operators() {
        let cfg = SystemConfig::miniature();
        let geo = cfg.geometry();
        let (net, p) = setup(&cfg);
        let mut r = rng(5);
        for q in 0..2 {
            let t = &net.arch.terminals[q];
            let mut tx = SimOperator::build(&geo, q, Side::Tx).unwrap();
            tx.set_phases(p.phases(q, Side::Tx)).unwrap();
            let dense_t = tx_propagation(&tx, t.tx_antennas).unwrap();
            let mut rx = SimOperator::build(&geo, q, Side::Rx).unwrap();
            rx.set_phases(p.phases(q, Side::Rx)).unwrap();
            let dense_r = rx_propagation(&rx, t.rx_antennas).unwrap();

            let mut g = Graph::new();
            let vars = p.register(&mut g);
            let xin = paired_batch(&mut r, 3, t.tx_antennas);
            let xv = g.constant(xin.clone());
            let y = net.tx_sim_forward(&mut g, &vars, q, xv).unwrap();
            let fin = paired_batch(&mut r, 3, t.rx_aperture);
            let fv = g.constant(fin.clone());
            let z = net.rx_sim_forward(&mut g, &vars, q, fv).unwrap();
            for (input, out, dense) in [(&xin, y, &dense_t), (&fin, z, &dense_r)] {
                let n = input.cols() / 2;
                for b in 0..3 {
                    let v: Vec<Complex64> =
                        (0..n).map(|i| Complex64::new(input.get2(b, i), input.get2(b, n + i))).collect();
                    let want = dense.matvec(&v).unwrap();
                    let m = want.len();
                    let norm: f64 = want.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    let err: f64 = want
                        .iter()
                        .enumerate()
                        .map(|(i, w)| {
                            (Complex64::new(g.value(out).get2(b, i), g.value(out).get2(b, m + i)) - w)
                                .norm_sqr()
                        })
                        .sum::<f64>()
                        .sqrt();
                    assert!(err / norm < 1e-10, "{}", err / norm);
                }
            }
        }
    }

    #[test]
    fn channel_layer_matches_bracket() {
        let cfg = SystemConfig::miniature();
        let (net, _) = setup(&cfg);
        let real = ChannelModel::new(&cfg).unwrap().realize(3, ChannelMode::Instantaneous).unwrap();
        let ch = ChannelTensors::new(&real, &net.arch).unwrap();
        let mut r = rng(6);
        let s0 = paired_batch(&mut r, 2, net.arch.terminals[0].tx_aperture);
        let s1 = paired_batch(&mut r, 2, net.arch.terminals[1].tx_aperture);
        let mut g = Graph::new();
        let v0 = g.constant(s0.clone());
        let v1 = g.constant(s1.clone());
        let out = net.channel_layer(&mut g, [v0, v1], &ch).unwrap();
        let s = [&s0, &s1];
        let cvec = |t: &Tensor, b: usize| {
            let n = t.cols() / 2;
            (0..n).map(|i| Complex64::new(t.get2(b, i), t.get2(b, n + i))).collect::<Vec<_>>()
        };
        for q in 0..2 {
            let p = 1 - q;
            for b in 0..2 {
                let a = real.link(p, q).matvec(&cvec(s[p], b)).unwrap();
                let c = real.link(q, q).matvec(&cvec(s[q], b)).unwrap();
                let got = cvec(g.value(out[q]), b);
                for i in 0..a.len() {
                    let want = a[i] + c[i];
                    assert!((got[i] - want).norm() <= 1e-12 * want.norm().max(1e-30));
                }
            }
        }
    }

    #[test]
    fn rx_dnn_zero_last_linear_gives_half() {
        let (net, mut p) = setup(&SystemConfig::miniature());
        for (k, t) in p.tensors.iter_mut() {
            if k == "t1.rx.w1" || k == "t1.rx.b1" {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let vars = p.register(&mut g);
        let y = g.constant(paired_batch(&mut rng(7), 6, 4));
        let mut st = Vec::new();
        let out = net.rx_dnn_forward(&mut g, &vars, &p, 0, y, Mode::Train, &mut st).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.5));
        assert_eq!(st.len(), 3);
    }

    #[test]
    fn forward_shape_range_and_determinism() {
        let cfg = SystemConfig::miniature();
        let (net, p) = setup(&cfg);
        let real = ChannelModel::new(&cfg).unwrap().realize(3, ChannelMode::Instantaneous).unwrap();
        let ch = ChannelTensors::new(&real, &net.arch).unwrap();
        let block = BitBlock::random(16, 8, 10.0, &mut rng(8));
        let run = || {
            let mut g = Graph::new();
            let vars = p.register(&mut g);
            let mut nr = rng(9);
            let f = net.forward(&mut g, &vars, &p, &block, &ch, Some(&mut nr), Mode::Train).unwrap();
            g.value(f.soft).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[16, 8]);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a, run());
    }

    #[test]
    fn mismatched_channel_rejected() {
        let cfg = SystemConfig::miniature();
        let (net, _) = setup(&cfg);
        let real = ChannelModel::new(&SystemConfig::reference())
            .unwrap()
            .realize(1, ChannelMode::Instantaneous)
            .unwrap();
        assert!(matches!(
            ChannelTensors::new(&real, &net.arch),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn phase_table_is_wrapped() {
        let (_, mut p) = setup(&SystemConfig::miniature());
        p.tensors.get_mut("t1.theta1").unwrap().data_mut()[0] = -1.0;
        let table = p.phase_table();
        let first = table.lines().nth(1).unwrap();
        let phase: f64 = first.split('\t').nth(4).unwrap().parse().unwrap();
        assert!((phase - (std::f64::consts::TAU - 1.0)).abs() < 1e-12);
        assert!(table.lines().skip(1).all(|l| {
            let v: f64 = l.split('\t').nth(4).unwrap().parse().unwrap();
            (0.0..std::f64::consts::TAU).contains(&v)
        }));
    }

    fn toy(noise: bool) -> SystemConfig {
        let mut cfg = SystemConfig::miniature();
        for t in cfg.sim.terminals.iter_mut() {
            t.tx_layers = 0;
            t.rx_layers = 0;
            t.tx_antennas = crate::config::Grid::new(4, 1);
            t.rx_antennas = crate::config::Grid::new(4, 1);
        }
        cfg.system.bits = [2, 2];
        cfg.training.seed = 3;
        cfg.training.power_min_dbm = 30.0;
        cfg.training.power_max_dbm = 30.0;
        cfg.training.noise = noise;
        cfg
    }

    #[test]
    fn noiseless_toy_recovers_bits() {
        let cfg = toy(false);
        let real = ChannelRealization::ideal(4, 1e-4);
        let ck = crate::training::train_scratch(&cfg, &real, 1000, 0.005).unwrap();
        let net = Emnn::new(&cfg).unwrap();
        let ch = ChannelTensors::new(&real, &net.arch).unwrap();
        let block = BitBlock::random(500, 4, 30.0, &mut crate::rng::stream(9, crate::rng::Purpose::Eval));
        let mut g = Graph::new();
        let vars = ck.params.register(&mut g);
        let fp = net.forward(&mut g, &vars, &ck.params, &block, &ch, None, Mode::Eval).unwrap();
        let sent: Vec<u8> = block.bits.data().iter().map(|&b| b as u8).collect();
        assert_eq!(hard_decision(g.value(fp.soft).data()), sent);
    }

    #[test]
    fn toy_with_noise_at_high_power() {
        let cfg = toy(true);
        let real = ChannelRealization::ideal(4, 1e-4);
        let ck = crate::training::train_scratch(&cfg, &real, 1000, 0.005).unwrap();
        let b = crate::eval::evaluate(&ck, &real, 30.0, 10_000, 1).unwrap();
        assert!(b.ratio() < 1e-3, "{}", b.ratio());
    }
}
