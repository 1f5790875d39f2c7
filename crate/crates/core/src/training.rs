//! Loss, initialization, AdamW, batch sampling, base training, fine-tuning
//! and checkpoints.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use sha2::{Digest, Sha256};

use crate::autograd::{grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::channel::{ChannelMode, ChannelModel, ChannelRealization};
use crate::config::{SystemConfig, TrainConfig};
use crate::emnn::{decays, BitBlock, ChannelTensors, Emnn, EmnnParams, Mode, BN_MOMENTUM};
use crate::error::{shape_err, Error, Result};
use crate::rng::{stream, Purpose};

/// Clamp applied inside the logarithms of the loss.
pub const LOG_EPS: f64 = 1e-12;

/// `−(1/B) Σ_batch Σ_bits [b log b̂ + (1 − b) log(1 − b̂)]` on the graph.
pub fn bce_loss(g: &mut Graph, bits: Var, soft: Var) -> Result<Var> {
    let (bs, ss) = (g.value(bits).shape().to_vec(), g.value(soft).shape().to_vec());
    if bs != ss || bs.len() != 2 {
        return Err(shape_err("bce_loss", format!("bits {bs:?} vs estimates {ss:?}")));
    }
    let batch = bs[0] as f64;
    let log_p = g.log(soft, LOG_EPS);
    let neg = g.scale(soft, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_q = g.log(one_minus, LOG_EPS);
    let nb = g.scale(bits, -1.0);
    let not_bits = g.add_scalar(nb, 1.0);
    let a = g.hadamard(log_p, bits)?;
    let b = g.hadamard(log_q, not_bits)?;
    let s = g.add(a, b)?;
    let total = g.reduce_sum(s);
    Ok(g.scale(total, -1.0 / batch))
}

/// Scalar reference for [`bce_loss`].
pub fn bce_scalar(bits: &[f64], soft: &[f64], batch: usize) -> f64 {
    let mut acc = 0.0;
    for (&b, &p) in bits.iter().zip(soft) {
        acc += b * p.max(LOG_EPS).ln() + (1.0 - b) * (1.0 - p).max(LOG_EPS).ln();
    }
    -acc / batch as f64
}

/// Xavier-uniform `[fan_out, fan_in]` weight matrix.
pub fn xavier_init<R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::matrix(fan_out, fan_in, data).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            epsilon: c.adam_epsilon,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One AdamW update with decoupled weight decay; decay applies only where
/// [`decays`] says so.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    h: &AdamHyper,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::Diverged {
                epoch: state.step as usize,
                reason: format!("non-finite gradient for '{name}'"),
            });
        }
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            _ => return Err(shape_err("adamw_step", format!("gradient for '{name}'"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).unwrap();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let wd = if decays(name) { h.weight_decay } else { 0.0 };
        for k in 0..g.len() {
            let gk = g.data()[k];
            let mk = h.beta1 * m.data()[k] + (1.0 - h.beta1) * gk;
            let vk = h.beta2 * v.data()[k] + (1.0 - h.beta2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let pk = &mut p.data_mut()[k];
            *pk -= lr * wd * *pk;
            *pk -= lr * (mk / c1) / ((vk / c2).sqrt() + h.epsilon);
        }
    }
    Ok(())
}

/// `lr0 · decay^⌊epoch / interval⌋`, floored.
pub fn lr_schedule(epoch: usize, lr0: f64, c: &TrainConfig) -> f64 {
    let steps = (epoch / c.decay_interval.max(1)) as i32;
    (lr0 * c.lr_decay.powi(steps)).max(c.lr_floor)
}

/// Uniform bits and Beta-distributed per-sample transmit powers.
pub fn sample_batch(rng: &mut ChaCha8Rng, total_bits: usize, c: &TrainConfig) -> BitBlock {
    let beta = Beta::new(c.power_alpha, c.power_beta).expect("validated Beta parameters");
    let batch = c.batch_size;
    let bits = (0..batch * total_bits)
        .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
        .collect();
    let power = (0..batch)
        .map(|_| c.power_min_dbm + (c.power_max_dbm - c.power_min_dbm) * beta.sample(rng))
        .collect();
    BitBlock {
        bits: Tensor::matrix(batch, total_bits, bits).unwrap(),
        power_dbm: power,
    }
}

/// Trailing moving average; entry `i` averages the last `window` losses up
/// to and including `i`.
pub fn smooth(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for i in 0..losses.len() {
        acc += losses[i];
        if i >= w {
            acc -= losses[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Serializable state of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Base,
    Finetune,
}

/// Everything needed to resume or evaluate a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: SystemConfig,
    pub stage: Stage,
    pub params: EmnnParams,
    pub optimizer: AdamState,
    pub rng: RngState,
    pub history: Vec<HistoryRow>,
    /// Set when training stopped on a non-finite loss; the parameters are
    /// then those of the last finite epoch.
    pub diverged: Option<String>,
}

impl Checkpoint {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.loss).collect()
    }

    /// Fails unless the stored tensors fit the network built from `config`.
    pub fn ensure_compatible(&self, config: &SystemConfig) -> Result<()> {
        let net = Emnn::new(config)?;
        self.params
            .check_against(&net.arch, config.training.trainable_power)
    }

    pub fn history_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss", "lr"])?;
        for h in &self.history {
            w.write_record([h.epoch.to_string(), h.loss.to_string(), h.lr.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("ascii csv"))
    }
}

/// Where each training step takes its channel from.
pub enum ChannelSource<'a> {
    /// Fresh realization (fading and shadowing) every step.
    Statistical(&'a ChannelModel),
    /// One frozen realization.
    Frozen(&'a ChannelTensors),
}

/// Runs `epochs` steps, one fresh mini-batch each.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    net: &Emnn,
    config: &SystemConfig,
    params: &mut EmnnParams,
    opt: &mut AdamState,
    source: ChannelSource<'_>,
    epochs: usize,
    lr0: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<HistoryRow>, Option<String>)> {
    let tc = &config.training;
    let hyper = AdamHyper::from(tc);
    let total_bits = config.total_bits();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = lr_schedule(epoch, lr0, tc);
        let block = sample_batch(rng, total_bits, tc);
        let drawn;
        let ch = match &source {
            ChannelSource::Frozen(t) => *t,
            ChannelSource::Statistical(model) => {
                let seed = rng.random::<u64>();
                let real = model.realize(seed, ChannelMode::Statistical)?;
                drawn = ChannelTensors::new(&real, &net.arch)?;
                &drawn
            }
        };
        let noise_seed = rng.random::<u64>();
        let mut noise_rng = stream(noise_seed, Purpose::Noise);
        let noise = tc.noise.then_some(&mut noise_rng);

        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let fp = net.forward(&mut g, &vars, params, &block, ch, noise, Mode::Train)?;
        let bits = g.constant(block.bits.clone());
        let loss = bce_loss(&mut g, bits, fp.soft)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Ok((history, Some(format!("loss {value} at epoch {epoch}"))));
        }
        let mut grads = g.backward(loss)?;
        let grads: BTreeMap<String, Tensor> = vars
            .iter()
            .filter_map(|(k, v)| grads.take(*v).map(|t| (k.clone(), t)))
            .collect();
        let mut next = params.tensors.clone();
        match adamw_step(&mut next, &grads, opt, lr, &hyper) {
            Ok(()) => {}
            Err(Error::Diverged { reason, .. }) => {
                return Ok((history, Some(format!("{reason} at epoch {epoch}"))))
            }
            Err(e) => return Err(e),
        }
        params.tensors = next;
        params.update_running(&fp.bn_stats, BN_MOMENTUM);
        history.push(HistoryRow { epoch, loss: value, lr });
        if epoch % 100 == 0 {
            log::debug!("epoch {epoch} loss {value:.5} lr {lr:.2e}");
        }
    }
    Ok((history, None))
}

/// Trains a base model on statistical channels, redrawn every batch.
pub fn train_base(config: &SystemConfig) -> Result<Checkpoint> {
    config.validate()?;
    let net = Emnn::new(config)?;
    let model = ChannelModel::new(config)?;
    let seed = config.training.seed;
    let mut params = net.init_params(&mut stream(seed, Purpose::Init));
    let mut opt = AdamState::default();
    let mut rng = stream(seed, Purpose::Batch);
    let (history, diverged) = train_loop(
        &net,
        config,
        &mut params,
        &mut opt,
        ChannelSource::Statistical(&model),
        config.training.epochs,
        config.training.learning_rate,
        &mut rng,
    )?;
    Ok(Checkpoint {
        config: config.clone(),
        stage: Stage::Base,
        params,
        optimizer: opt,
        rng: RngState::capture(&rng),
        history,
        diverged,
    })
}

/// Trains from a fresh initialization on one frozen channel.
pub fn train_scratch(
    config: &SystemConfig,
    real: &ChannelRealization,
    epochs: usize,
    lr0: f64,
) -> Result<Checkpoint> {
    config.validate()?;
    let net = Emnn::new(config)?;
    let ch = ChannelTensors::new(real, &net.arch)?;
    let seed = config.training.seed;
    let mut params = net.init_params(&mut stream(seed, Purpose::Init));
    let mut opt = AdamState::default();
    let mut rng = stream(seed ^ real.seed, Purpose::Batch);
    let (history, diverged) = train_loop(
        &net,
        config,
        &mut params,
        &mut opt,
        ChannelSource::Frozen(&ch),
        epochs,
        lr0,
        &mut rng,
    )?;
    Ok(Checkpoint {
        config: config.clone(),
        stage: Stage::Finetune,
        params,
        optimizer: opt,
        rng: RngState::capture(&rng),
        history,
        diverged,
    })
}

/// Continues training `base` on a frozen realization with a fresh optimizer
/// state. Defaults come from the base configuration.
pub fn finetune(
    base: &Checkpoint,
    real: &ChannelRealization,
    epochs: Option<usize>,
    lr0: Option<f64>,
) -> Result<Checkpoint> {
    let config = &base.config;
    let net = Emnn::new(config)?;
    base.params
        .check_against(&net.arch, config.training.trainable_power)?;
    let ch = ChannelTensors::new(real, &net.arch)?;
    let epochs = epochs.unwrap_or_else(|| config.training.finetune_epochs());
    let lr0 = lr0.unwrap_or_else(|| config.training.finetune_learning_rate());
    let mut params = base.params.clone();
    let mut opt = AdamState::default();
    let mut rng = stream(config.training.seed ^ real.seed, Purpose::Batch);
    let (history, diverged) = train_loop(
        &net,
        config,
        &mut params,
        &mut opt,
        ChannelSource::Frozen(&ch),
        epochs,
        lr0,
        &mut rng,
    )?;
    Ok(Checkpoint {
        config: config.clone(),
        stage: Stage::Finetune,
        params,
        optimizer: opt,
        rng: RngState::capture(&rng),
        history,
        diverged,
    })
}

const MAGIC: &[u8; 8] = b"MDXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, kind: u8, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u8(kind);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() - self.pos {
            return Err(Error::Format("length field exceeds file".into()));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }
    fn tensor(&mut self) -> Result<(String, u8, Tensor)> {
        let name = self.string()?;
        let kind = self.u8()?;
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 3 {
            return Err(Error::Format(format!("tensor '{name}' has {ndim} axes")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n <= (self.buf.len() - self.pos) / 8).ok_or_else(|| {
            Error::Format(format!("tensor '{name}' shape {shape:?} exceeds file"))
        })?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Ok((name, kind, Tensor::new(shape, data)?))
    }
}

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_ADAM_M: u8 = 2;
const KIND_ADAM_V: u8 = 3;

/// Encodes a checkpoint:
/// magic, version, config JSON, its SHA-256, named tensors (little-endian
/// `f64` with shapes), optimizer step, rng state, history, stage, divergence
/// note, and a trailing SHA-256 over everything before it.
pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    let cfg = c.config.to_json();
    w.bytes(cfg.as_bytes());
    w.0.extend_from_slice(&Sha256::digest(cfg.as_bytes()));
    let groups = [
        (KIND_PARAM, &c.params.tensors),
        (KIND_BUFFER, &c.params.buffers),
        (KIND_ADAM_M, &c.optimizer.m),
        (KIND_ADAM_V, &c.optimizer.v),
    ];
    let count: usize = groups.iter().map(|(_, m)| m.len()).sum();
    w.u64(count as u64);
    for (kind, map) in groups {
        for (name, t) in map {
            w.tensor(name, kind, t);
        }
    }
    w.u64(c.optimizer.step);
    w.0.extend_from_slice(&c.rng.seed);
    w.u64(c.rng.stream);
    w.0.extend_from_slice(&c.rng.word_pos.to_le_bytes());
    w.u64(c.history.len() as u64);
    for h in &c.history {
        w.u64(h.epoch as u64);
        w.f64(h.loss);
        w.f64(h.lr);
    }
    w.u8(match c.stage {
        Stage::Base => 0,
        Stage::Finetune => 1,
    });
    w.bytes(c.diverged.as_deref().unwrap_or("").as_bytes());
    let sum = Sha256::digest(&w.0);
    w.0.extend_from_slice(&sum);
    w.0
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < MAGIC.len() + 4 + 32 || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (body, sum) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let cfg_bytes = r.bytes()?;
    let digest = r.take(32)?;
    if Sha256::digest(cfg_bytes).as_slice() != digest {
        return Err(Error::Format("config digest mismatch".into()));
    }
    let cfg_text =
        std::str::from_utf8(cfg_bytes).map_err(|_| Error::Format("config is not utf-8".into()))?;
    let config = SystemConfig::from_json(cfg_text)?;
    let count = r.u64()?;
    let mut params = EmnnParams {
        tensors: BTreeMap::new(),
        buffers: BTreeMap::new(),
    };
    let mut optimizer = AdamState::default();
    for _ in 0..count {
        let (name, kind, t) = r.tensor()?;
        let slot = match kind {
            KIND_PARAM => &mut params.tensors,
            KIND_BUFFER => &mut params.buffers,
            KIND_ADAM_M => &mut optimizer.m,
            KIND_ADAM_V => &mut optimizer.v,
            k => return Err(Error::Format(format!("unknown tensor kind {k}"))),
        };
        if slot.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
    }
    optimizer.step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let n = r.u64()? as usize;
    if n > body.len() / 24 {
        return Err(Error::Format("history length exceeds file".into()));
    }
    let mut history = Vec::with_capacity(n);
    for _ in 0..n {
        history.push(HistoryRow {
            epoch: r.u64()? as usize,
            loss: r.f64()?,
            lr: r.f64()?,
        });
    }
    let stage = match r.u8()? {
        0 => Stage::Base,
        1 => Stage::Finetune,
        s => return Err(Error::Format(format!("unknown stage {s}"))),
    };
    let note = r.string()?;
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        stage,
        params,
        optimizer,
        rng: RngState {
            seed,
            stream,
            word_pos,
        },
        history,
        diverged: (!note.is_empty()).then_some(note),
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(c))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Compares the analytic gradient of the batch loss against central finite
/// differences over every trainable tensor of a freshly initialized model.
/// One batch, one statistical channel draw and one noise draw are held fixed
/// across all evaluations; batchnorm runs in training mode.
pub fn gradcheck_model(
    config: &SystemConfig,
    batch: usize,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    config.validate()?;
    let net = Emnn::new(config)?;
    let params = net.init_params(&mut stream(seed, Purpose::Init));
    let mut rng = stream(seed, Purpose::Batch);
    let block = sample_batch(&mut rng, config.total_bits(), &config.training);
    let block = BitBlock::new(
        Tensor::matrix(batch.min(block.batch()), block.bits.cols(), {
            let n = batch.min(block.batch()) * block.bits.cols();
            block.bits.data()[..n].to_vec()
        })?,
        block.power_dbm[..batch.min(block.batch())].to_vec(),
    )?;
    let real = ChannelModel::new(config)?.realize(seed, ChannelMode::Statistical)?;
    let ch = ChannelTensors::new(&real, &net.arch)?;
    let noise_seed: u64 = rng.random();
    grad_check(&params.tensors, h, GRADCHECK_FLOOR, |g, vars| {
        let mut noise = stream(noise_seed, Purpose::Noise);
        let noise = config.training.noise.then_some(&mut noise);
        let fp = net.forward(g, vars, &params, &block, &ch, noise, Mode::Train)?;
        let bits = g.constant(block.bits.clone());
        bce_loss(g, bits, fp.soft)
    })
}

/// Relative-error denominator floor for gradient checks; entries whose
/// gradients are both below it are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-3;
