//! Architecture builders with parameter-count parity across groups.
//!
//! The single `z2cnn` code path covers the planar baseline and every
//! equivariant variant: the baseline is simply the trivial group, for which
//! lifting is a rescale and group convolution is planar convolution. Grouped
//! variants scale channel widths by 1/sqrt(filter group support), rounded to
//! nearest, so total parameter count stays close to the matched baseline.
//!
//! Seven 3x3 convolution blocks (conv, batchnorm, ReLU), a 2x2 spatial max
//! pool after block 2, then group pooling, global average pooling, and a
//! linear classifier. A `small-resnet` backbone (three stages of two
//! residual blocks) is included for extension experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::groups::GroupSpec;
use crate::layers::{gconv, gmaxpool, grelu, group_batchnorm, group_pool, GFeatureMap, GFilterBank};
use crate::tensor::{BnMode, Graph, NodeId, Padding, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Z2Cnn,
    SmallResnet,
}

/// Deliberate equivariance defects used as verification fixtures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Defect {
    None,
    /// Adds a constant per-slot bias after block 4's batchnorm, turning the
    /// shared affine into a per-slot one. Breaks equivariance for any
    /// nontrivial group.
    PerSlotBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub group: GroupSpec,
    /// Baseline channel widths; the builder divides by sqrt(filter group
    /// support) per layer. z2cnn reads 7 entries, small-resnet 3.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    pub seed: u64,
    pub defect: Defect,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: Backbone::Z2Cnn,
            group: GroupSpec::Trivial,
            widths: vec![20; 7],
            kernel: 3,
            classes: 10,
            seed: 0,
            defect: Defect::None,
        }
    }
}

/// Parse `key=value` lines; `#` starts a comment, blank lines are skipped,
/// later duplicates win. Unknown keys are left for other sections.
pub(crate) fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {:?}", lineno + 1, raw)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn kv_get<'a>(kv: &'a [(String, String)], key: &str) -> Option<&'a str> {
    kv.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn parse_num<T: std::str::FromStr>(kv: &[(String, String)], key: &str, default: T) -> Result<T> {
    match kv_get(kv, key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| Error::config(format!("bad value for {}: {:?}", key, v))),
    }
}

impl ModelConfig {
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let d = ModelConfig::default();
        let backbone = match kv_get(&kv, "backbone").unwrap_or("z2cnn") {
            "z2cnn" => Backbone::Z2Cnn,
            "small-resnet" => Backbone::SmallResnet,
            other => return Err(Error::config(format!("unknown backbone {:?}", other))),
        };
        let n: usize = parse_num(&kv, "n", 3)?;
        let m: usize = parse_num(&kv, "m", 3)?;
        let dd: f64 = parse_num(&kv, "d", 0.1)?;
        let group = match kv_get(&kv, "group").unwrap_or("trivial") {
            "trivial" => GroupSpec::Trivial,
            "hue" => GroupSpec::hue(n),
            "sat" => GroupSpec::sat(dd, m),
            "product" => GroupSpec::product(n, dd, m),
            other => return Err(Error::config(format!("unknown group {:?}", other))),
        };
        let widths = match kv_get(&kv, "widths") {
            None => match backbone {
                Backbone::Z2Cnn => d.widths.clone(),
                Backbone::SmallResnet => vec![8, 16, 32],
            },
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| Error::config(format!("bad width {:?}", p))))
                .collect::<Result<Vec<usize>>>()?,
        };
        if widths.is_empty() || widths.iter().any(|&w| w == 0) {
            return Err(Error::config("widths must be positive"));
        }
        let kernel: usize = parse_num(&kv, "kernel", d.kernel)?;
        if kernel % 2 == 0 {
            return Err(Error::config("kernel must be odd"));
        }
        let classes: usize = parse_num(&kv, "classes", d.classes)?;
        if classes < 2 {
            return Err(Error::config("classes must be at least 2"));
        }
        let seed: u64 = parse_num(&kv, "seed", d.seed)?;
        let defect = match kv_get(&kv, "defect").unwrap_or("none") {
            "none" => Defect::None,
            "per_slot_bias" => Defect::PerSlotBias,
            other => return Err(Error::config(format!("unknown defect {:?}", other))),
        };
        let cfg = ModelConfig { backbone, group, widths, kernel, classes, seed, defect };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        let need = match self.backbone {
            Backbone::Z2Cnn => 7,
            Backbone::SmallResnet => 3,
        };
        if self.widths.len() != need {
            return Err(Error::config(format!(
                "backbone needs {} widths, got {}",
                need,
                self.widths.len()
            )));
        }
        if self.scaled_widths().iter().any(|&w| w == 0) {
            return Err(Error::config("width scaling produced an empty layer"));
        }
        Ok(())
    }

    /// Canonical key=value form; parsing it back reproduces the config.
    pub fn to_kv_text(&self) -> String {
        let backbone = match self.backbone {
            Backbone::Z2Cnn => "z2cnn",
            Backbone::SmallResnet => "small-resnet",
        };
        let (group, n, m, d) = match &self.group {
            GroupSpec::Trivial => ("trivial", 1, 1, 0.1),
            GroupSpec::Hue(h) => ("hue", h.order(), 1, 0.1),
            GroupSpec::Sat(s) => ("sat", 1, s.positions(), s.step()),
            GroupSpec::Product(p) => ("product", p.hue.order(), p.sat.positions(), p.sat.step()),
        };
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let defect = match self.defect {
            Defect::None => "none",
            Defect::PerSlotBias => "per_slot_bias",
        };
        format!(
            "backbone={}\ngroup={}\nn={}\nm={}\nd={}\nwidths={}\nkernel={}\nclasses={}\nseed={}\ndefect={}\n",
            backbone,
            group,
            n,
            m,
            d,
            widths.join(","),
            self.kernel,
            self.classes,
            self.seed,
            defect
        )
    }

    /// Channel widths after dividing by sqrt(filter group support).
    pub fn scaled_widths(&self) -> Vec<usize> {
        let fs = self.group.filter_slots() as f64;
        self.widths.iter().map(|&w| (w as f64 / fs.sqrt()).round() as usize).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One named stage output of a forward pass, for equivariance reports and
/// feature export. 4-d entries carry their group-axis length.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub name: String,
    pub node: NodeId,
    pub slots: usize,
}

pub struct ForwardPass {
    pub logits: NodeId,
    /// Tape leaf of each trainable parameter (aligned with `Model::params`).
    pub param_nodes: Vec<Option<NodeId>>,
    pub trace: Vec<TraceEntry>,
    /// (running-mean param, running-var param, batchnorm node) per batchnorm,
    /// recorded in training mode for running-statistics updates.
    pub bn_updates: Vec<(usize, usize, NodeId)>,
    /// Feature map before group pooling, and its group-axis length.
    pub penultimate: NodeId,
    pub penultimate_slots: usize,
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_out: usize, slots_f: usize, c_in: usize, k: usize) {
        let bank = GFilterBank::init(self.rng, c_out, slots_f, c_in, k, false);
        self.params.push(Param { name: format!("{}.weight", name), value: bank.weights, trainable: true });
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.push(Param { name: format!("{}.scale", name), value: Tensor::full(&[c], 1.0), trainable: true });
        self.params.push(Param { name: format!("{}.bias", name), value: Tensor::zeros(&[c]), trainable: true });
        self.params.push(Param { name: format!("{}.running_mean", name), value: Tensor::zeros(&[c]), trainable: false });
        self.params.push(Param { name: format!("{}.running_var", name), value: Tensor::full(&[c], 1.0), trainable: false });
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        let bound = (6.0 / inp as f64).sqrt();
        let data = (0..out * inp)
            .map(|_| rand::Rng::gen_range(&mut *self.rng, -bound..bound) as f32)
            .collect();
        self.params.push(Param { name: format!("{}.weight", name), value: Tensor::new(&[out, inp], data), trainable: true });
        self.params.push(Param { name: format!("{}.bias", name), value: Tensor::zeros(&[out]), trainable: true });
    }
}

impl Model {
    /// Deterministic: identical config (seed included) gives bitwise-identical
    /// initial parameters.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder { rng: &mut rng, params: Vec::new() };
        let fs = config.group.filter_slots();
        let k = config.kernel;
        let widths = config.scaled_widths();
        match config.backbone {
            Backbone::Z2Cnn => {
                let mut c_in = 3;
                for (i, &w) in widths.iter().enumerate() {
                    b.conv(&format!("conv{}", i + 1), w, fs, c_in, k);
                    b.bn(&format!("bn{}", i + 1), w);
                    c_in = w;
                }
                b.linear("fc", config.classes, *widths.last().expect("checked"));
            }
            Backbone::SmallResnet => {
                b.conv("stem", widths[0], fs, 3, k);
                b.bn("stem_bn", widths[0]);
                let mut c_in = widths[0];
                for (si, &w) in widths.iter().enumerate() {
                    for bi in 0..2 {
                        let name = format!("s{}b{}", si + 1, bi + 1);
                        b.conv(&format!("{}.conv1", name), w, fs, c_in, k);
                        b.bn(&format!("{}.bn1", name), w);
                        b.conv(&format!("{}.conv2", name), w, fs, w, k);
                        b.bn(&format!("{}.bn2", name), w);
                        let downsample = si > 0 && bi == 0;
                        if downsample || c_in != w {
                            b.conv(&format!("{}.proj", name), w, fs, c_in, 1);
                            b.bn(&format!("{}.proj_bn", name), w);
                        }
                        c_in = w;
                    }
                }
                b.linear("fc", config.classes, *widths.last().expect("checked"));
            }
        }
        Ok(Model { config, params: b.params })
    }

    pub fn param_idx(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name))
    }

    /// Total trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    fn leaf(
        &self,
        g: &mut Graph,
        param_nodes: &mut [Option<NodeId>],
        name: &str,
        mode: Mode,
    ) -> NodeId {
        let idx = self.param_idx(name);
        let p = &self.params[idx];
        let requires_grad = p.trainable && mode == Mode::Train;
        let node = g.leaf(p.value.clone(), requires_grad);
        if p.trainable {
            param_nodes[idx] = Some(node);
        }
        node
    }

    fn bn_layer(
        &self,
        g: &mut Graph,
        param_nodes: &mut [Option<NodeId>],
        bn_updates: &mut Vec<(usize, usize, NodeId)>,
        f: &GFeatureMap,
        name: &str,
        mode: Mode,
    ) -> GFeatureMap {
        let sc = self.leaf(g, param_nodes, &format!("{}.scale", name), mode);
        let bi = self.leaf(g, param_nodes, &format!("{}.bias", name), mode);
        let mean_idx = self.param_idx(&format!("{}.running_mean", name));
        let var_idx = self.param_idx(&format!("{}.running_var", name));
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: self.params[mean_idx].value.data().to_vec(),
                var: self.params[var_idx].value.data().to_vec(),
            },
        };
        let out = group_batchnorm(g, f, sc, bi, BN_EPS, bn_mode);
        if mode == Mode::Train {
            bn_updates.push((mean_idx, var_idx, out.node));
        }
        out
    }

    /// Run the network on an already-lifted input leaf
    /// [B, |G|*3, H, W]. Training mode records gradients and batch-statistics
    /// updates; eval mode normalizes by running statistics.
    pub fn forward(&self, g: &mut Graph, input: NodeId, mode: Mode) -> ForwardPass {
        match self.config.backbone {
            Backbone::Z2Cnn => self.forward_z2(g, input, mode),
            Backbone::SmallResnet => self.forward_resnet(g, input, mode),
        }
    }

    fn forward_z2(&self, g: &mut Graph, input: NodeId, mode: Mode) -> ForwardPass {
        let spec = &self.config.group;
        let mut param_nodes = vec![None; self.params.len()];
        let mut bn_updates = Vec::new();
        let mut f = GFeatureMap::new(g, input, spec.order());
        assert_eq!(f.channels, 3, "z2cnn expects 3 channels per slot");
        let mut trace = vec![TraceEntry { name: "lift".into(), node: input, slots: f.slots }];
        for i in 0..self.config.widths.len() {
            let w = self.leaf(g, &mut param_nodes, &format!("conv{}.weight", i + 1), mode);
            f = gconv(g, &f, w, None, spec, 1, Padding::Same);
            f = self.bn_layer(g, &mut param_nodes, &mut bn_updates, &f, &format!("bn{}", i + 1), mode);
            if self.config.defect == Defect::PerSlotBias && i == 3 {
                f = per_slot_bias_defect(g, &f);
            }
            f = grelu(g, &f);
            if i == 1 {
                f = gmaxpool(g, &f, 2);
            }
            trace.push(TraceEntry { name: format!("block{}", i + 1), node: f.node, slots: f.slots });
        }
        let penultimate = f;
        self.head(g, &mut param_nodes, penultimate, trace, bn_updates, mode)
    }

    fn forward_resnet(&self, g: &mut Graph, input: NodeId, mode: Mode) -> ForwardPass {
        let spec = &self.config.group;
        let mut param_nodes = vec![None; self.params.len()];
        let mut bn_updates = Vec::new();
        let mut f = GFeatureMap::new(g, input, spec.order());
        let mut trace = vec![TraceEntry { name: "lift".into(), node: input, slots: f.slots }];
        let w = self.leaf(g, &mut param_nodes, "stem.weight", mode);
        f = gconv(g, &f, w, None, spec, 1, Padding::Same);
        f = self.bn_layer(g, &mut param_nodes, &mut bn_updates, &f, "stem_bn", mode);
        f = grelu(g, &f);
        trace.push(TraceEntry { name: "stem".into(), node: f.node, slots: f.slots });
        let widths = self.config.scaled_widths();
        let mut c_in = widths[0];
        for (si, &wd) in widths.iter().enumerate() {
            for bi in 0..2 {
                let name = format!("s{}b{}", si + 1, bi + 1);
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let w1 = self.leaf(g, &mut param_nodes, &format!("{}.conv1.weight", name), mode);
                let mut y = gconv(g, &f, w1, None, spec, stride, Padding::Same);
                y = self.bn_layer(g, &mut param_nodes, &mut bn_updates, &y, &format!("{}.bn1", name), mode);
                y = grelu(g, &y);
                let w2 = self.leaf(g, &mut param_nodes, &format!("{}.conv2.weight", name), mode);
                y = gconv(g, &y, w2, None, spec, 1, Padding::Same);
                y = self.bn_layer(g, &mut param_nodes, &mut bn_updates, &y, &format!("{}.bn2", name), mode);
                let skip = if stride != 1 || c_in != wd {
                    let wp = self.leaf(g, &mut param_nodes, &format!("{}.proj.weight", name), mode);
                    let p = gconv(g, &f, wp, None, spec, stride, Padding::Same);
                    self.bn_layer(g, &mut param_nodes, &mut bn_updates, &p, &format!("{}.proj_bn", name), mode)
                } else {
                    f
                };
                let sum = g.add(y.node, skip.node);
                f = GFeatureMap { node: g.relu(sum), slots: y.slots, channels: y.channels };
                trace.push(TraceEntry { name, node: f.node, slots: f.slots });
                c_in = wd;
            }
        }
        self.head(g, &mut param_nodes, f, trace, bn_updates, mode)
    }

    fn head(
        &self,
        g: &mut Graph,
        param_nodes: &mut Vec<Option<NodeId>>,
        penultimate: GFeatureMap,
        mut trace: Vec<TraceEntry>,
        bn_updates: Vec<(usize, usize, NodeId)>,
        mode: Mode,
    ) -> ForwardPass {
        let pooled = group_pool(g, &penultimate);
        trace.push(TraceEntry { name: "group_pool".into(), node: pooled, slots: 1 });
        let feats = g.avgpool_spatial(pooled);
        let w = self.leaf(g, param_nodes, "fc.weight", mode);
        let b = self.leaf(g, param_nodes, "fc.bias", mode);
        let logits = g.linear(feats, w, b);
        trace.push(TraceEntry { name: "logits".into(), node: logits, slots: 1 });
        ForwardPass {
            logits,
            param_nodes: std::mem::take(param_nodes),
            trace,
            bn_updates,
            penultimate: penultimate.node,
            penultimate_slots: penultimate.slots,
        }
    }
}

/// The verification fixture: a constant bias that differs per group slot,
/// equivalent to giving the preceding batchnorm per-slot shift parameters.
fn per_slot_bias_defect(g: &mut Graph, f: &GFeatureMap) -> GFeatureMap {
    let mut vals = vec![0.0f32; f.slots * f.channels];
    for s in 0..f.slots {
        for c in 0..f.channels {
            vals[s * f.channels + c] = 0.1 * s as f32;
        }
    }
    let b = g.constant(Tensor::new(&[f.slots * f.channels], vals));
    GFeatureMap { node: g.add_channel_bias(f.node, b), ..*f }
}
