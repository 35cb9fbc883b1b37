//! Command workflows: dataset generation, training, evaluation,
//! equivariance verification, hue sorting, and feature export.
//!
//! Every subcommand is a plain library function over paths and values, so
//! tests and examples drive the same code the binary does.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::{act_hue_sat, hsl_to_rgb, tile_grid, HslImage};
use crate::data::{
    load_idx, make_split, read_dataset, sample_grid_ppm, write_split_with_manifest, DatasetManifest,
    LabeledHsl, SUBSET_A_DEG, SUBSET_B_DEG,
};
use crate::error::{Error, Result};
use crate::groups::{act_gmap_hue, act_gmap_product, act_gmap_sat, GroupSpec};
use crate::layers::lift;
use crate::models::{Backbone, Mode, Model, ModelConfig};
use crate::tensor::{Graph, Tensor};
use crate::train::{
    evaluate, load_checkpoint, save_checkpoint, train, AdamState, EvalResult, MetricsLog,
    TrainConfig,
};

pub const EMBEDDING_MAGIC: u32 = 0x4347_4645;

#[derive(Parser, Debug)]
#[command(name = "chromaconv", about = "Color-equivariant convolutional networks")]
pub struct Cli {
    /// key=value config file (model and training sections share one file)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for produced files
    #[arg(long, default_value = ".", global = true)]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Colorize a grayscale digit archive into an HSL split
    MakeDataset {
        /// Directory holding IDX image/label archives (gzip or raw)
        #[arg(long)]
        source: PathBuf,
        /// Which archive pair to read: train or test
        #[arg(long)]
        split: String,
        /// Hue subset: A = [0, 240) degrees, B = [240, 360)
        #[arg(long)]
        subset: String,
    },
    /// Train a model from the config file
    Train {
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Measure per-layer equivariance gaps of a checkpoint
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of random probe images
        #[arg(long, default_value_t = 20)]
        inputs: usize,
    },
    /// Order one class's examples by hue using embedding distances
    SortHue {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        class: u8,
        /// Cap on examples taken from the class
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write per-slot embeddings of a dataset to a binary file
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
}

pub fn cmd_make_dataset(
    source: &Path,
    split: &str,
    subset: &str,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let (img_name, lbl_name) = match split {
        "train" => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test" => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        other => return Err(Error::invalid(format!("split must be train or test, got {:?}", other))),
    };
    let (lo, hi) = match subset {
        "A" => SUBSET_A_DEG,
        "B" => SUBSET_B_DEG,
        other => return Err(Error::invalid(format!("subset must be A or B, got {:?}", other))),
    };
    let find = |name: &str| -> Result<PathBuf> {
        for cand in [source.join(format!("{}.gz", name)), source.join(name)] {
            if cand.is_file() {
                return Ok(cand);
            }
        }
        Err(Error::invalid(format!("{} not found under {}", name, source.display())))
    };
    let (images, labels) = load_idx(&find(img_name)?, &find(lbl_name)?)?;
    let source_pairs: Vec<_> = images.into_iter().zip(labels).collect();
    let examples = make_split(&source_pairs, lo, hi, seed);
    fs::create_dir_all(out_dir)?;
    let out = out_dir.join(format!("{}-{}.hsl1", split, subset));
    let manifest = write_split_with_manifest(&out, split, &examples, lo, hi, seed)?;
    let preview = sample_grid_ppm(&examples, 64, 8);
    fs::write(out_dir.join(format!("{}-{}-preview.ppm", split, subset)), preview)?;
    Ok(manifest)
}

pub struct TrainedRun {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_eval: Option<EvalResult>,
}

pub fn cmd_train(
    config_text: &str,
    seed_override: Option<u64>,
    train_data: Option<&Path>,
    eval_data: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainedRun> {
    let mut mcfg = ModelConfig::from_kv_text(config_text)?;
    let mut tcfg = TrainConfig::from_kv_text(config_text)?;
    if let Some(s) = seed_override {
        mcfg.seed = s;
        tcfg.seed = s;
    }
    let train_path = train_data
        .map(Path::to_path_buf)
        .or_else(|| tcfg.train_data.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::config("no training dataset given (train_data)"))?;
    let train_set = read_dataset(&train_path)?;
    let eval_path = eval_data
        .map(Path::to_path_buf)
        .or_else(|| tcfg.eval_data.as_ref().map(PathBuf::from));
    let eval_set = match &eval_path {
        Some(p) => Some(read_dataset(p)?),
        None => None,
    };
    tcfg.train_data = Some(train_path.display().to_string());
    tcfg.eval_data = eval_path.as_ref().map(|p| p.display().to_string());

    let mut model = Model::build(mcfg.clone())?;
    let mut adam = AdamState::new(&model);
    let mut metrics = MetricsLog::default();
    train(&mut model, &mut adam, &tcfg, &train_set, eval_set.as_deref(), 0, &mut metrics)?;
    let final_eval = match &eval_set {
        Some(ev) => Some(evaluate(&model, ev, crate::train::EVAL_BATCH)?),
        None => None,
    };

    fs::create_dir_all(out_dir)?;
    let echo = format!("{}{}", mcfg.to_kv_text(), tcfg.to_kv_text());
    let rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let ckpt = out_dir.join("checkpoint.ckpt");
    save_checkpoint(&ckpt, &model, &adam, &rng, tcfg.epochs as u32, &echo)?;
    let metrics_path = out_dir.join("metrics.csv");
    fs::write(&metrics_path, metrics.to_csv())?;
    Ok(TrainedRun { checkpoint: ckpt, metrics: metrics_path, final_eval })
}

pub fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<EvalResult> {
    let ck = load_checkpoint(checkpoint)?;
    let set = read_dataset(data)?;
    evaluate(&ck.model, &set, crate::train::EVAL_BATCH)
}

/// Per-layer equivariance gap for one group element. `None` means the
/// truncation mask left no slots to compare at that depth.
#[derive(Clone, Debug)]
pub struct LayerGap {
    pub layer: String,
    pub gap: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ElementReport {
    pub element: String,
    pub gaps: Vec<LayerGap>,
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub elements: Vec<ElementReport>,
    pub tol: f64,
    /// Largest gap among comparisons that had valid slots.
    pub max_checked_gap: f64,
    pub pass: bool,
}

enum Elem {
    Hue(usize),
    Sat(isize),
    Prod(usize, isize),
}

impl Elem {
    fn label(&self) -> String {
        match self {
            Elem::Hue(i) => format!("hue+{}", i),
            Elem::Sat(s) => format!("sat{:+}", s),
            Elem::Prod(i, s) => format!("hue+{} sat{:+}", i, s),
        }
    }

    fn sat_step(&self) -> isize {
        match self {
            Elem::Hue(_) => 0,
            Elem::Sat(s) | Elem::Prod(_, s) => *s,
        }
    }

    fn apply_image(&self, spec: &GroupSpec, img: &HslImage) -> HslImage {
        let (hue, sat) = match (self, spec) {
            (Elem::Hue(i), GroupSpec::Hue(h)) => (h.element_value(*i), 0.0),
            (Elem::Sat(s), GroupSpec::Sat(sp)) => (0.0, sp.element_value(*s)),
            (Elem::Prod(i, s), GroupSpec::Product(p)) => {
                (p.hue.element_value(*i), p.sat.element_value(*s))
            }
            _ => panic!("element/group mismatch"),
        };
        act_hue_sat(hue, sat, img)
    }

    fn apply_gmap(&self, spec: &GroupSpec, t: &Tensor) -> Tensor {
        match (self, spec) {
            (Elem::Hue(i), GroupSpec::Hue(h)) => act_gmap_hue(h.order(), *i, t),
            (Elem::Sat(s), GroupSpec::Sat(sp)) => act_gmap_sat(sp.positions(), *s, t),
            (Elem::Prod(i, s), GroupSpec::Product(p)) => act_gmap_product(p, *i, *s, t),
            _ => panic!("element/group mismatch"),
        }
    }
}

fn nonidentity_elements(spec: &GroupSpec) -> Vec<Elem> {
    match spec {
        GroupSpec::Trivial => Vec::new(),
        GroupSpec::Hue(h) => (1..h.order()).map(Elem::Hue).collect(),
        GroupSpec::Sat(s) => {
            let c = (s.positions() as isize - 1) / 2;
            (-c..=c).filter(|&x| x != 0).map(Elem::Sat).collect()
        }
        GroupSpec::Product(p) => {
            let c = (p.sat.positions() as isize - 1) / 2;
            let mut out = Vec::new();
            for i in 0..p.hue.order() {
                for s in -c..=c {
                    if i == 0 && s == 0 {
                        continue;
                    }
                    out.push(Elem::Prod(i, s));
                }
            }
            out
        }
    }
}

/// Truncation bookkeeping for saturation-lifted maps: after one group
/// convolution, output slot j is comparable across a shift by `sigma` steps
/// only when both sides kept full filter support there and every
/// contributing input slot was itself comparable.
fn mask_after_gconv(mask: &[bool], sigma: isize, radius: usize) -> Vec<bool> {
    if sigma == 0 {
        // a pure hue rotation leaves the saturation axis alone; boundary
        // renormalization is then identical on both sides of the comparison
        return mask.to_vec();
    }
    let m = mask.len() as isize;
    let r = radius as isize;
    (0..m)
        .map(|j| {
            let full = |x: isize| x - r >= 0 && x + r < m;
            full(j)
                && full(j + sigma)
                && (-r..=r).all(|i| {
                    let t = j + i;
                    t >= 0 && t < m && mask[t as usize]
                })
        })
        .collect()
}

/// (main-path group convolutions, parallel skip-path group convolutions)
/// crossed by one trace entry, for mask propagation.
fn entry_gconvs(backbone: Backbone, name: &str) -> (usize, Option<usize>) {
    match backbone {
        Backbone::Z2Cnn => (1, None),
        Backbone::SmallResnet => {
            if name == "stem" {
                (1, None)
            } else {
                // s{stage}b{block}: projection on first block of stages 2+
                let bytes = name.as_bytes();
                let stage = (bytes[1] - b'0') as usize;
                let block = (bytes[3] - b'0') as usize;
                (2, Some(usize::from(stage > 1 && block == 1)))
            }
        }
    }
}

fn masked_gap(expected: &Tensor, actual: &Tensor, slots: usize, valid: &[bool]) -> Option<f64> {
    assert_eq!(expected.shape(), actual.shape());
    let sh = expected.shape();
    assert_eq!(sh[1] % slots, 0);
    let block = (sh[1] / slots) * sh[2] * sh[3];
    let (e, a) = (expected.data(), actual.data());
    let mut best: Option<f64> = None;
    for b in 0..sh[0] {
        for s in 0..slots {
            if !valid[s] {
                continue;
            }
            let at = (b * slots + s) * block;
            for i in at..at + block {
                let d = (e[i] as f64 - a[i] as f64).abs();
                best = Some(best.map_or(d, |x: f64| x.max(d)));
            }
        }
    }
    best
}

/// Expand a saturation-axis mask to the flattened group axis.
fn slot_mask(spec: &GroupSpec, sat_mask: &[bool]) -> Vec<bool> {
    match spec {
        GroupSpec::Trivial => vec![true],
        GroupSpec::Hue(h) => vec![true; h.order()],
        GroupSpec::Sat(_) => sat_mask.to_vec(),
        GroupSpec::Product(p) => {
            let mut out = Vec::with_capacity(p.order());
            for _ in 0..p.hue.order() {
                out.extend_from_slice(sat_mask);
            }
            out
        }
    }
}

fn sat_positions(spec: &GroupSpec) -> usize {
    match spec {
        GroupSpec::Sat(s) => s.positions(),
        GroupSpec::Product(p) => p.sat.positions(),
        _ => 1,
    }
}

fn sat_radius(spec: &GroupSpec) -> usize {
    match spec {
        GroupSpec::Sat(s) => s.radius(),
        GroupSpec::Product(p) => p.sat.radius(),
        _ => 0,
    }
}

struct TraceValues {
    entries: Vec<(String, Tensor, usize)>,
}

fn run_trace(model: &Model, images: &[&HslImage]) -> TraceValues {
    let mut g = Graph::new();
    let input = g.leaf(lift(images, &model.config.group), false);
    let pass = model.forward(&mut g, input, Mode::Eval);
    let entries = pass
        .trace
        .iter()
        .map(|t| (t.name.clone(), g.value(t.node).clone(), t.slots))
        .collect();
    TraceValues { entries }
}

/// Compare, layer by layer, the network applied to transformed inputs
/// against the group action applied to the network's own feature maps.
/// Evaluation-mode forward, so batch statistics cannot leak across slots.
pub fn verify_model(model: &Model, images: &[HslImage], tol: f64) -> VerifyReport {
    let spec = &model.config.group;
    let refs: Vec<&HslImage> = images.iter().collect();
    let base = run_trace(model, &refs);
    let mut elements = Vec::new();
    let mut max_gap = 0.0f64;
    let positions = sat_positions(spec);
    let radius = sat_radius(spec);
    for elem in nonidentity_elements(spec) {
        let moved: Vec<HslImage> = images.iter().map(|im| elem.apply_image(spec, im)).collect();
        let moved_refs: Vec<&HslImage> = moved.iter().collect();
        let shifted = run_trace(model, &moved_refs);
        let sigma = elem.sat_step();
        let mut sat_mask: Vec<bool> = (0..positions as isize)
            .map(|k| k + sigma >= 0 && k + sigma < positions as isize)
            .collect();
        let mut gaps = Vec::new();
        for ((name, base_t, slots), (_, shifted_t, _)) in
            base.entries.iter().zip(&shifted.entries)
        {
            let gap = if name == "logits" || name == "group_pool" {
                // invariant head: only permutation actions leave it fixed
                if sigma == 0 {
                    Some(base_t.max_abs_diff(shifted_t) as f64)
                } else {
                    None
                }
            } else {
                if name != "lift" {
                    let (main, skip) = entry_gconvs(model.config.backbone, name);
                    let mut main_mask = sat_mask.clone();
                    for _ in 0..main {
                        main_mask = mask_after_gconv(&main_mask, sigma, radius);
                    }
                    if let Some(skip_n) = skip {
                        let mut skip_mask = sat_mask.clone();
                        for _ in 0..skip_n {
                            skip_mask = mask_after_gconv(&skip_mask, sigma, radius);
                        }
                        for (a, b) in main_mask.iter_mut().zip(&skip_mask) {
                            *a = *a && *b;
                        }
                    }
                    sat_mask = main_mask;
                }
                let valid = slot_mask(spec, &sat_mask);
                let expected = elem.apply_gmap(spec, base_t);
                masked_gap(&expected, shifted_t, *slots, &valid)
            };
            if let Some(v) = gap {
                max_gap = max_gap.max(v);
            }
            gaps.push(LayerGap { layer: name.clone(), gap });
        }
        elements.push(ElementReport { element: elem.label(), gaps });
    }
    VerifyReport { elements, tol, max_checked_gap: max_gap, pass: max_gap <= tol }
}

/// Probe images whose saturation stays far enough from the clamp boundaries
/// that every tested shift acts exactly. Hue needs no margin (cyclic).
pub fn random_verify_images(
    spec: &GroupSpec,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<HslImage>> {
    let (lo, hi) = match spec {
        GroupSpec::Sat(s) | GroupSpec::Product(crate::groups::ProductGroupSpec { sat: s, .. }) => {
            let max_steps = (s.positions() - 1) as f64; // lift reach + element reach
            let margin = max_steps * s.step() * 255.0;
            if margin * 2.0 >= 255.0 {
                return Err(Error::invalid(format!(
                    "saturation margin {:.1} leaves no clamp-free band; lower d or positions",
                    margin
                )));
            }
            (margin, 255.0 - margin)
        }
        _ => (0.0, 255.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;
    Ok((0..count)
        .map(|_| HslImage {
            height,
            width,
            h: (0..n).map(|_| rng.gen_range(0.0..255.0)).collect(),
            s: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
            l: (0..n).map(|_| rng.gen_range(0.0..255.0)).collect(),
        })
        .collect())
}

pub fn cmd_verify(checkpoint: &Path, inputs: usize, seed: u64, tol: f64) -> Result<VerifyReport> {
    let ck = load_checkpoint(checkpoint)?;
    let images = random_verify_images(&ck.model.config.group, inputs, 16, 16, seed)?;
    Ok(verify_model(&ck.model, &images, tol))
}

/// One example's embedding: for each group slot, the flattened feature
/// vector taken just before group pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u32,
    pub label: u8,
    pub slots: Vec<Vec<f32>>,
}

pub fn extract_embeddings(
    model: &Model,
    items: &[(u32, &LabeledHsl)],
    batch: usize,
) -> Result<Vec<EmbeddingRecord>> {
    if items.is_empty() {
        return Err(Error::invalid("no examples to embed"));
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let imgs: Vec<&HslImage> = chunk.iter().map(|(_, e)| &e.image).collect();
        let mut g = Graph::new();
        let input = g.leaf(lift(&imgs, &model.config.group), false);
        let pass = model.forward(&mut g, input, Mode::Eval);
        let t = g.value(pass.penultimate);
        let sh = t.shape().to_vec();
        let slots = pass.penultimate_slots;
        let dim = (sh[1] / slots) * sh[2] * sh[3];
        let data = t.data();
        for (bi, (id, ex)) in chunk.iter().enumerate() {
            let mut rec = EmbeddingRecord { id: *id, label: ex.label, slots: Vec::with_capacity(slots) };
            for s in 0..slots {
                let at = (bi * slots + s) * dim;
                rec.slots.push(data[at..at + dim].to_vec());
            }
            out.push(rec);
        }
    }
    Ok(out)
}

/// Distances between `b` and every cyclic hue shift of `a`:
/// profile[i] = || shift_i(a) - b ||.
pub fn hue_profile(a: &EmbeddingRecord, b: &EmbeddingRecord) -> Vec<f64> {
    let n = a.slots.len();
    assert_eq!(n, b.slots.len(), "embeddings must share slot count");
    (0..n)
        .map(|i| {
            let mut acc = 0.0f64;
            for k in 0..n {
                let sa = &a.slots[(k + i) % n];
                let sb = &b.slots[k];
                assert_eq!(sa.len(), sb.len());
                for (x, y) in sa.iter().zip(sb) {
                    let d = *x as f64 - *y as f64;
                    acc += d * d;
                }
            }
            acc.sqrt()
        })
        .collect()
}

/// Smallest shift distance and the shift achieving it (lowest index wins
/// ties). Invariant to a common hue shift of both arguments.
pub fn hue_distance(a: &EmbeddingRecord, b: &EmbeddingRecord) -> (f64, usize) {
    let profile = hue_profile(a, b);
    let mut best = 0;
    for (i, &d) in profile.iter().enumerate() {
        if d < profile[best] {
            best = i;
        }
    }
    (profile[best], best)
}

/// Sort key from a distance profile: the minimizing shift (lowest index wins
/// ties) and the residual distance at that shift. Exact grid matches carry a
/// zero residual, so they lead their shift class; off-grid hues trail in
/// order of how far they sit from the matched shift.
pub fn sort_key(profile: &[f64]) -> (f64, usize, f64) {
    let mut best = 0;
    for (i, &d) in profile.iter().enumerate() {
        if d < profile[best] {
            best = i;
        }
    }
    (best as f64, best, profile[best])
}

#[derive(Clone, Debug)]
pub struct HueSorted {
    pub id: u32,
    pub label: u8,
    pub key: f64,
    pub shift: usize,
    pub residual: f64,
}

/// Order records by hue relative to the first record (the anchor): each
/// record gets the shift minimizing its distance to the shifted anchor, and
/// records sharing a shift are ordered by residual, then id.
pub fn sort_by_hue(records: &[EmbeddingRecord]) -> Vec<HueSorted> {
    assert!(!records.is_empty());
    let anchor = &records[0];
    let mut rows: Vec<HueSorted> = records
        .iter()
        .map(|r| {
            let (key, shift, residual) = sort_key(&hue_profile(anchor, r));
            HueSorted { id: r.id, label: r.label, key, shift, residual }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.key
            .partial_cmp(&b.key)
            .unwrap()
            .then(a.residual.partial_cmp(&b.residual).unwrap())
            .then(a.id.cmp(&b.id))
    });
    rows
}

pub struct SortOutput {
    pub rows: Vec<HueSorted>,
    pub index_path: PathBuf,
    pub grid_path: PathBuf,
}

pub fn cmd_sort_hue(
    checkpoint: &Path,
    data: &Path,
    class: u8,
    limit: Option<usize>,
    out_dir: &Path,
) -> Result<SortOutput> {
    let ck = load_checkpoint(checkpoint)?;
    let set = read_dataset(data)?;
    let mut items: Vec<(u32, &LabeledHsl)> = set
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label == class)
        .map(|(i, e)| (i as u32, e))
        .collect();
    if let Some(cap) = limit {
        items.truncate(cap);
    }
    if items.is_empty() {
        return Err(Error::invalid(format!("class {} has no examples in {}", class, data.display())));
    }
    let records = extract_embeddings(&ck.model, &items, 64)?;
    let rows = sort_by_hue(&records);
    fs::create_dir_all(out_dir)?;
    let index_path = out_dir.join(format!("sorted-hue-{}.txt", class));
    let mut text = String::from("rank\tid\tkey\tshift\tresidual\n");
    for (rank, r) in rows.iter().enumerate() {
        text.push_str(&format!("{}\t{}\t{:.6}\t{}\t{:.6}\n", rank, r.id, r.key, r.shift, r.residual));
    }
    fs::write(&index_path, text)?;
    let by_id: std::collections::HashMap<u32, &LabeledHsl> = items.iter().map(|&(i, e)| (i, e)).collect();
    let grid: Vec<_> = rows.iter().map(|r| hsl_to_rgb(&by_id[&r.id].image)).collect();
    let grid_path = out_dir.join(format!("sorted-hue-{}.ppm", class));
    fs::write(&grid_path, tile_grid(&grid, 8).to_ppm())?;
    Ok(SortOutput { rows, index_path, grid_path })
}

/// Embedding archive: magic, record count, slot count, per-slot dimension,
/// then per record an id, a label, and slots*dim little-endian f32 values.
pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("refusing to write an empty embedding archive"));
    }
    let slots = records[0].slots.len();
    let dim = records[0].slots[0].len();
    let mut buf: Vec<u8> = Vec::new();
    buf.write_u32::<LittleEndian>(EMBEDDING_MAGIC)?;
    buf.write_u32::<LittleEndian>(records.len() as u32)?;
    buf.write_u32::<LittleEndian>(slots as u32)?;
    buf.write_u32::<LittleEndian>(dim as u32)?;
    for r in records {
        if r.slots.len() != slots || r.slots.iter().any(|s| s.len() != dim) {
            return Err(Error::invalid("embedding records must share shape"));
        }
        buf.write_u32::<LittleEndian>(r.id)?;
        buf.push(r.label);
        for slot in &r.slots {
            for &x in slot {
                buf.write_f32::<LittleEndian>(x)?;
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];
    let magic = r.read_u32::<LittleEndian>()?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::format(format!("{}: bad embedding magic {:#x}", path.display(), magic)));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let slots = r.read_u32::<LittleEndian>()? as usize;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.read_u32::<LittleEndian>()?;
        let label = r.read_u8()?;
        let mut rec = EmbeddingRecord { id, label, slots: Vec::with_capacity(slots) };
        for _ in 0..slots {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(r.read_f32::<LittleEndian>()?);
            }
            rec.slots.push(v);
        }
        out.push(rec);
    }
    if !r.is_empty() {
        return Err(Error::format(format!("{} trailing bytes in embedding archive", r.len())));
    }
    Ok(out)
}

pub fn cmd_export_features(
    checkpoint: &Path,
    data: &Path,
    limit: Option<usize>,
    out_dir: &Path,
) -> Result<PathBuf> {
    let ck = load_checkpoint(checkpoint)?;
    let set = read_dataset(data)?;
    let take = limit.unwrap_or(set.len()).min(set.len());
    let items: Vec<(u32, &LabeledHsl)> =
        set[..take].iter().enumerate().map(|(i, e)| (i as u32, e)).collect();
    let records = extract_embeddings(&ck.model, &items, 64)?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("features.bin");
    write_embeddings(&path, &records)?;
    Ok(path)
}

fn print_confusion(result: &EvalResult, classes: usize) {
    println!("loss {:.6}  error {:.2}%", result.loss, result.error * 100.0);
    println!("confusion (rows: true, columns: predicted):");
    for row in 0..classes {
        let cells: Vec<String> = (0..classes)
            .map(|col| format!("{:>5}", result.confusion[row * classes + col]))
            .collect();
        println!("  {}", cells.join(" "));
    }
}

/// Dispatch a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match run_inner(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            2
        }
    }
}

fn run_inner(cli: Cli) -> Result<i32> {
    let seed = cli.seed;
    let out_dir = cli.out_dir.clone();
    match cli.command {
        Command::MakeDataset { source, split, subset } => {
            let manifest = cmd_make_dataset(&source, &split, &subset, seed.unwrap_or(0), &out_dir)?;
            print!("{}", manifest.to_text());
            Ok(0)
        }
        Command::Train { train_data, eval_data } => {
            let config = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::config("train needs --config"))?;
            let text = fs::read_to_string(config)?;
            let run = cmd_train(&text, seed, train_data.as_deref(), eval_data.as_deref(), &out_dir)?;
            println!("checkpoint: {}", run.checkpoint.display());
            println!("metrics:    {}", run.metrics.display());
            if let Some(ev) = &run.final_eval {
                println!("final eval: loss {:.6}  error {:.2}%", ev.loss, ev.error * 100.0);
            }
            Ok(0)
        }
        Command::Eval { checkpoint, data } => {
            let result = cmd_eval(&checkpoint, &data)?;
            let classes = (result.confusion.len() as f64).sqrt() as usize;
            print_confusion(&result, classes);
            Ok(0)
        }
        Command::Verify { checkpoint, inputs } => {
            let report = cmd_verify(&checkpoint, inputs, seed.unwrap_or(0), 1e-4)?;
            for el in &report.elements {
                for lg in &el.gaps {
                    match lg.gap {
                        Some(v) => println!("{:<16} {:<12} {:.3e}", el.element, lg.layer, v),
                        None => println!("{:<16} {:<12} no comparable slots", el.element, lg.layer),
                    }
                }
            }
            println!(
                "max gap {:.3e} (tolerance {:.1e}): {}",
                report.max_checked_gap,
                report.tol,
                if report.pass { "PASS" } else { "FAIL" }
            );
            Ok(if report.pass { 0 } else { 1 })
        }
        Command::SortHue { checkpoint, data, class, limit } => {
            let sorted = cmd_sort_hue(&checkpoint, &data, class, limit, &out_dir)?;
            println!("index: {}", sorted.index_path.display());
            println!("grid:  {}", sorted.grid_path.display());
            for (rank, r) in sorted.rows.iter().enumerate() {
                println!("{:>4}  id {:>6}  key {:.4}  residual {:.4}", rank, r.id, r.key, r.residual);
            }
            Ok(0)
        }
        Command::ExportFeatures { checkpoint, data, limit } => {
            let path = cmd_export_features(&checkpoint, &data, limit, &out_dir)?;
            println!("features: {}", path.display());
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u32, slots: Vec<Vec<f32>>) -> EmbeddingRecord {
        EmbeddingRecord { id, label: 0, slots }
    }

    #[test]
    fn hue_distance_detects_pure_shifts() {
        // b is a shifted by 2: shift_2(a) == b exactly
        let a = rec(0, vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0], vec![4.0, 0.0]]);
        let b = rec(1, vec![vec![3.0, 0.0], vec![4.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]]);
        let (d, shift) = hue_distance(&a, &b);
        assert_eq!(shift, 2);
        assert!(d < 1e-12);
        let (d0, s0) = hue_distance(&a, &a);
        assert_eq!(s0, 0);
        assert!(d0 < 1e-12);
    }

    #[test]
    fn hue_distance_is_shift_invariant() {
        let a = rec(0, vec![vec![0.3, -1.0], vec![2.0, 0.5], vec![-0.7, 1.1]]);
        let b = rec(1, vec![vec![1.4, 0.2], vec![-0.3, 0.9], vec![0.0, 2.0]]);
        let shift = |r: &EmbeddingRecord, k: usize| {
            let n = r.slots.len();
            rec(r.id, (0..n).map(|i| r.slots[(i + k) % n].clone()).collect())
        };
        let (d, _) = hue_distance(&a, &b);
        for k in 1..3 {
            let (dk, _) = hue_distance(&shift(&a, k), &shift(&b, k));
            assert!((d - dk).abs() < 1e-9, "common shift changed distance: {} vs {}", d, dk);
        }
    }

    #[test]
    fn sort_key_picks_minimizing_shift() {
        // tie between shifts 1 and 2: lowest index wins
        let (key, best, r) = sort_key(&[5.0, 1.0, 1.0, 5.0]);
        assert_eq!((key, best), (1.0, 1));
        assert_eq!(r, 1.0);
        // exact grid point has zero residual
        let (key0, best0, r0) = sort_key(&[0.0, 3.0, 4.0, 3.0]);
        assert_eq!((key0, best0), (0.0, 0));
        assert_eq!(r0, 0.0);
        // a strictly smaller later entry beats an earlier near-tie
        let (keyw, bestw, _) = sort_key(&[1.0 + 1e-9, 5.0, 6.0, 1.0]);
        assert_eq!((keyw, bestw), (3.0, 3));
    }

    #[test]
    fn sort_by_hue_orders_synthetic_ring() {
        // 6 records: pure shifts of one base pattern, scrambled
        let n = 6;
        let base: Vec<Vec<f32>> = (0..n).map(|i| vec![(i * i) as f32, i as f32 - 2.0]).collect();
        let shifted = |k: usize| -> Vec<Vec<f32>> {
            (0..n).map(|i| base[(i + k) % n].clone()).collect()
        };
        let order = [0usize, 4, 2, 5, 1, 3];
        let records: Vec<EmbeddingRecord> = order
            .iter()
            .enumerate()
            .map(|(id, &k)| rec(id as u32, shifted(k)))
            .collect();
        let rows = sort_by_hue(&records);
        let keys: Vec<usize> = rows.iter().map(|r| r.key.round() as usize % n).collect();
        assert_eq!(keys, vec![0, 1, 2, 3, 4, 5]);
        // ids follow the shift amounts: record with shift k sorts to rank k
        let expect_id = |k: usize| order.iter().position(|&x| x == k).unwrap() as u32;
        for (rank, row) in rows.iter().enumerate() {
            assert_eq!(row.id, expect_id(rank), "rank {}", rank);
        }
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = std::env::temp_dir().join("chromaconv-cli-tests");
        fs::create_dir_all(&dir).unwrap();
        let records = vec![
            rec(3, vec![vec![1.0, 2.0], vec![3.0, 4.0]]),
            rec(9, vec![vec![-1.0, 0.5], vec![0.0, -2.0]]),
        ];
        let path = dir.join("emb.bin");
        write_embeddings(&path, &records).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), records);
    }

    #[test]
    fn mask_propagation_shrinks_support() {
        let m0 = vec![true; 5];
        let m1 = mask_after_gconv(&m0, 1, 1);
        assert_eq!(m1, vec![false, true, true, false, false]);
        // slot 2 needs slot 3, which already fell to boundary rescaling
        let m2 = mask_after_gconv(&m1, 1, 1);
        assert_eq!(m2, vec![false; 5]);
        // a pure hue element leaves the saturation axis untouched
        assert_eq!(mask_after_gconv(&m1, 0, 1), m1);
    }

    #[test]
    fn cli_parses_subcommands() {
        use clap::Parser;
        let cli = Cli::parse_from([
            "chromaconv",
            "--seed",
            "7",
            "--out-dir",
            "/tmp/x",
            "verify",
            "--checkpoint",
            "model.ckpt",
            "--inputs",
            "5",
        ]);
        assert_eq!(cli.seed, Some(7));
        match cli.command {
            Command::Verify { inputs, .. } => assert_eq!(inputs, 5),
            other => panic!("wrong command {:?}", other),
        }
    }
}
