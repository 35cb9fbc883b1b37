//! Training and evaluation: Adam, seeded shuffling, running-statistics
//! maintenance, metrics logging, and binary checkpoints.
//!
//! Determinism contract: a (model seed, train seed) pair fixes the entire
//! run. Shuffles derive from per-epoch generator streams, dataset order
//! never feeds back into parameter math, and optimizer arithmetic is done
//! in f64 per element before storing back to f32. Two runs with the same
//! seeds produce bitwise-identical parameters and metrics.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledHsl;
use crate::error::{Error, Result};
use crate::layers::lift;
use crate::models::{kv_get, parse_kv, Mode, Model, ModelConfig, BN_MOMENTUM};
use crate::tensor::{Graph, Tensor};

pub const CHECKPOINT_MAGIC: u32 = 0x4347_5250;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Evaluate every this many optimizer steps (0: epoch ends only).
    pub eval_every: usize,
    pub seed: u64,
    pub train_data: Option<String>,
    pub eval_data: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 128,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eval_every: 0,
            seed: 0,
            train_data: None,
            eval_data: None,
        }
    }
}

impl TrainConfig {
    /// Reads the training keys of a key=value config; model keys are ignored
    /// so one file can hold both sections.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let d = TrainConfig::default();
        let num = |key: &str, default: f64| -> Result<f64> {
            match kv_get(&kv, key) {
                None => Ok(default),
                Some(v) => v.parse().map_err(|_| Error::config(format!("bad value for {}: {:?}", key, v))),
            }
        };
        let cfg = TrainConfig {
            epochs: num("epochs", d.epochs as f64)? as usize,
            batch_size: num("batch_size", d.batch_size as f64)? as usize,
            lr: num("lr", d.lr)?,
            beta1: num("beta1", d.beta1)?,
            beta2: num("beta2", d.beta2)?,
            epsilon: num("epsilon", d.epsilon)?,
            eval_every: num("eval_every", 0.0)? as usize,
            seed: num("seed", 0.0)? as u64,
            train_data: kv_get(&kv, "train_data").map(str::to_string),
            eval_data: kv_get(&kv, "eval_data").map(str::to_string),
        };
        if cfg.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(cfg)
    }

    /// Training keys only; `seed` is shared with the model section and not
    /// repeated here.
    pub fn to_kv_text(&self) -> String {
        let mut out = format!(
            "epochs={}\nbatch_size={}\nlr={}\nbeta1={}\nbeta2={}\nepsilon={}\neval_every={}\n",
            self.epochs, self.batch_size, self.lr, self.beta1, self.beta2, self.epsilon, self.eval_every
        );
        if let Some(p) = &self.train_data {
            out.push_str(&format!("train_data={}\n", p));
        }
        if let Some(p) = &self.eval_data {
            out.push_str(&format!("eval_data={}\n", p));
        }
        out
    }
}

/// First and second moment buffers per parameter (empty for non-trainable
/// entries), plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u32,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zero = |p: &crate::models::Param| {
            if p.trainable {
                vec![0.0f32; p.value.numel()]
            } else {
                Vec::new()
            }
        };
        AdamState {
            t: 0,
            m: model.params.iter().map(zero).collect(),
            v: model.params.iter().map(zero).collect(),
        }
    }
}

/// One Adam update. Moment and parameter arithmetic runs in f64 per element;
/// buffers are stored back as f32.
pub fn adam_step(
    model: &mut Model,
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (idx, grad) in grads.iter().enumerate() {
        let g = match grad {
            Some(g) => g,
            None => continue,
        };
        let p = &mut model.params[idx];
        debug_assert!(p.trainable);
        let pd = p.value.data_mut();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        assert_eq!(pd.len(), g.len());
        for i in 0..pd.len() {
            let gi = g[i] as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + epsilon);
            pd[i] = (pd[i] as f64 - step) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, epoch: usize, step: usize, split: &str, loss: f64, error: f64) {
        self.rows.push(MetricsRow { epoch, step, split: split.to_string(), loss, error });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,split,loss,error\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.step, r.split, r.loss, r.error));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub loss: f64,
    /// Misclassification fraction in [0, 1].
    pub error: f64,
    /// Row-major confusion counts, row = true class, column = predicted.
    pub confusion: Vec<usize>,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &Model, data: &[LabeledHsl], batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let classes = model.config.classes;
    let mut confusion = vec![0usize; classes * classes];
    let mut loss_sum = 0.0f64;
    let mut wrong = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let imgs: Vec<&crate::colorspace::HslImage> = chunk.iter().map(|e| &e.image).collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label as usize).collect();
        let mut g = Graph::new();
        let input = g.leaf(lift(&imgs, &model.config.group), false);
        let pass = model.forward(&mut g, input, Mode::Eval);
        let loss_node = g.softmax_cross_entropy(pass.logits, &labels);
        let loss = g.value(loss_node).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite eval loss {}", loss)));
        }
        loss_sum += loss * chunk.len() as f64;
        let probs = g.probs(loss_node);
        for (bi, &label) in labels.iter().enumerate() {
            let pred = argmax(&probs[bi * classes..(bi + 1) * classes]);
            confusion[label * classes + pred] += 1;
            if pred != label {
                wrong += 1;
            }
        }
    }
    Ok(EvalResult {
        loss: loss_sum / data.len() as f64,
        error: wrong as f64 / data.len() as f64,
        confusion,
    })
}

/// Deterministic permutation for one epoch: Fisher-Yates driven by stream
/// (epoch + 1) of the train seed, so resuming at an epoch boundary replays
/// the identical order without tracking generator history.
fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Run epochs [start_epoch, cfg.epochs). Appends one metrics row per
/// optimizer step and one eval row per epoch end (plus periodic eval rows
/// when `eval_every` is set). Aborts with `Diverged` on a non-finite loss.
pub fn train(
    model: &mut Model,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    train_set: &[LabeledHsl],
    eval_set: Option<&[LabeledHsl]>,
    start_epoch: usize,
    metrics: &mut MetricsLog,
) -> Result<()> {
    if train_set.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let bs = cfg.batch_size;
    let steps_per_epoch = train_set.len().div_ceil(bs);
    let classes = model.config.classes;
    for epoch in start_epoch..cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        for (bi, batch_ids) in order.chunks(bs).enumerate() {
            let step = epoch * steps_per_epoch + bi + 1;
            let imgs: Vec<&crate::colorspace::HslImage> =
                batch_ids.iter().map(|&i| &train_set[i].image).collect();
            let labels: Vec<usize> = batch_ids.iter().map(|&i| train_set[i].label as usize).collect();
            let mut g = Graph::new();
            let input = g.leaf(lift(&imgs, &model.config.group), false);
            let pass = model.forward(&mut g, input, Mode::Train);
            let loss_node = g.softmax_cross_entropy(pass.logits, &labels);
            let loss = g.value(loss_node).item() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {} at epoch {} step {}",
                    loss, epoch, step
                )));
            }
            let batch_err = {
                let probs = g.probs(loss_node);
                let wrong = labels
                    .iter()
                    .enumerate()
                    .filter(|&(bi, &l)| argmax(&probs[bi * classes..(bi + 1) * classes]) != l)
                    .count();
                wrong as f64 / labels.len() as f64
            };
            g.backward(loss_node);
            let grads: Vec<Option<Vec<f32>>> = pass
                .param_nodes
                .iter()
                .map(|&n| n.and_then(|n| g.grad(n).map(<[f32]>::to_vec)))
                .collect();
            let stats: Vec<(usize, usize, Vec<f32>, Vec<f32>)> = pass
                .bn_updates
                .iter()
                .map(|&(mi, vi, node)| {
                    let (mean, var) = g.bn_batch_stats(node);
                    (mi, vi, mean, var)
                })
                .collect();
            drop(g);
            adam_step(model, &grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
            for (mi, vi, mean, var) in stats {
                blend(model.params[mi].value.data_mut(), &mean);
                blend(model.params[vi].value.data_mut(), &var);
            }
            metrics.push(epoch, step, "train", loss, batch_err);
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                if let Some(ev) = eval_set {
                    let r = evaluate(model, ev, EVAL_BATCH)?;
                    metrics.push(epoch, step, "eval", r.loss, r.error);
                }
            }
        }
        if let Some(ev) = eval_set {
            let r = evaluate(model, ev, EVAL_BATCH)?;
            metrics.push(epoch, (epoch + 1) * steps_per_epoch, "eval", r.loss, r.error);
        }
    }
    Ok(())
}

fn blend(running: &mut [f32], batch: &[f32]) {
    assert_eq!(running.len(), batch.len());
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: u32,
    pub config_text: String,
}

fn group_code(spec: &crate::groups::GroupSpec) -> (u32, u32, u32, f64) {
    use crate::groups::GroupSpec::*;
    match spec {
        Trivial => (0, 1, 1, 0.0),
        Hue(h) => (1, h.order() as u32, 1, 0.0),
        Sat(s) => (2, 1, s.positions() as u32, s.step()),
        Product(p) => (3, p.hue.order() as u32, p.sat.positions() as u32, p.sat.step()),
    }
}

fn check_saveable(model: &Model) -> Result<()> {
    use crate::groups::GroupSpec::*;
    let sat = match &model.config.group {
        Sat(s) => Some(s),
        Product(p) => Some(&p.sat),
        _ => None,
    };
    if let Some(s) = sat {
        if s.radius() != 1 {
            return Err(Error::invalid(format!(
                "checkpoint format stores saturation banks of radius 1, model has {}",
                s.radius()
            )));
        }
    }
    Ok(())
}

/// All scalars little-endian. Layout: magic, version, config text echo,
/// group code (kind, n, m, d), epoch, generator state (32-byte seed, u128
/// word position, u64 stream), named parameter tensors (running statistics
/// included), then Adam's step count and per-trainable-parameter moment
/// buffers in parameter order.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    adam: &AdamState,
    rng: &ChaCha8Rng,
    epoch: u32,
    config_text: &str,
) -> Result<()> {
    check_saveable(model)?;
    let mut buf: Vec<u8> = Vec::new();
    buf.write_u32::<LittleEndian>(CHECKPOINT_MAGIC)?;
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let cb = config_text.as_bytes();
    buf.write_u32::<LittleEndian>(cb.len() as u32)?;
    buf.extend_from_slice(cb);
    let (kind, n, m, d) = group_code(&model.config.group);
    buf.write_u32::<LittleEndian>(kind)?;
    buf.write_u32::<LittleEndian>(n)?;
    buf.write_u32::<LittleEndian>(m)?;
    buf.write_f64::<LittleEndian>(d)?;
    buf.write_u32::<LittleEndian>(epoch)?;
    buf.extend_from_slice(&rng.get_seed());
    buf.write_u128::<LittleEndian>(rng.get_word_pos())?;
    buf.write_u64::<LittleEndian>(rng.get_stream())?;
    buf.write_u32::<LittleEndian>(model.params.len() as u32)?;
    for p in &model.params {
        let nb = p.name.as_bytes();
        buf.write_u32::<LittleEndian>(nb.len() as u32)?;
        buf.extend_from_slice(nb);
        buf.write_u32::<LittleEndian>(p.value.shape().len() as u32)?;
        for &dim in p.value.shape() {
            buf.write_u32::<LittleEndian>(dim as u32)?;
        }
        for &x in p.value.data() {
            buf.write_f32::<LittleEndian>(x)?;
        }
    }
    buf.write_u32::<LittleEndian>(adam.t)?;
    for (idx, p) in model.params.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        if adam.m[idx].len() != p.value.numel() || adam.v[idx].len() != p.value.numel() {
            return Err(Error::invalid(format!("optimizer state shape mismatch for {}", p.name)));
        }
        for &x in &adam.m[idx] {
            buf.write_f32::<LittleEndian>(x)?;
        }
        for &x in &adam.v[idx] {
            buf.write_f32::<LittleEndian>(x)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];
    let magic = r.read_u32::<LittleEndian>()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("{}: bad checkpoint magic {:#x}", path.display(), magic)));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {}", version)));
    }
    let clen = r.read_u32::<LittleEndian>()? as usize;
    let mut cb = vec![0u8; clen];
    r.read_exact(&mut cb)?;
    let config_text = String::from_utf8(cb).map_err(|_| Error::format("config echo is not UTF-8"))?;
    let config = ModelConfig::from_kv_text(&config_text)?;
    let kind = r.read_u32::<LittleEndian>()?;
    let n = r.read_u32::<LittleEndian>()?;
    let m = r.read_u32::<LittleEndian>()?;
    let d = r.read_f64::<LittleEndian>()?;
    if (kind, n, m, d) != group_code(&config.group) {
        return Err(Error::format("group code disagrees with config echo"));
    }
    let epoch = r.read_u32::<LittleEndian>()?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let word_pos = r.read_u128::<LittleEndian>()?;
    let stream = r.read_u64::<LittleEndian>()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let mut model = Model::build(config)?;
    let pcount = r.read_u32::<LittleEndian>()? as usize;
    if pcount != model.params.len() {
        return Err(Error::format(format!(
            "checkpoint has {} parameters, model needs {}",
            pcount,
            model.params.len()
        )));
    }
    let mut filled = vec![false; model.params.len()];
    for _ in 0..pcount {
        let nlen = r.read_u32::<LittleEndian>()? as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|_| Error::format("parameter name is not UTF-8"))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let idx = model
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::format(format!("unexpected parameter {:?} in checkpoint", name)))?;
        if filled[idx] {
            return Err(Error::format(format!("duplicate parameter {:?}", name)));
        }
        if model.params[idx].value.shape() != dims.as_slice() {
            return Err(Error::format(format!(
                "parameter {:?} has shape {:?}, model needs {:?}",
                name,
                dims,
                model.params[idx].value.shape()
            )));
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f32::<LittleEndian>()?);
        }
        model.params[idx].value = Tensor::new(&dims, data);
        filled[idx] = true;
    }
    let t = r.read_u32::<LittleEndian>()?;
    let mut adam = AdamState::new(&model);
    adam.t = t;
    for idx in 0..model.params.len() {
        if !model.params[idx].trainable {
            continue;
        }
        let numel = model.params[idx].value.numel();
        for buf in [&mut adam.m[idx], &mut adam.v[idx]] {
            buf.clear();
            for _ in 0..numel {
                buf.push(r.read_f32::<LittleEndian>()?);
            }
        }
    }
    if !r.is_empty() {
        return Err(Error::format(format!("{} trailing bytes after checkpoint", r.len())));
    }
    Ok(Checkpoint { model, adam, rng, epoch, config_text })
}
