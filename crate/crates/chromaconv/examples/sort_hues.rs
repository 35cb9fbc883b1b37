//! Recover a hue ordering nobody told the network about.
//!
//! One digit is painted at the four grid hues of a hue(4) model plus ten
//! random in-between hues, the images are shuffled, and a randomly
//! initialized (never trained) network sorts them: each image is matched to
//! the group shift that best aligns its pre-pooling feature map with the
//! first image's, and ties are broken by the residual alignment distance.
//! The recovered ring follows the color wheel because the representation
//! carries hue structurally, not because anything was learned.

use chromaconv::cli::cmd_sort_hue;
use chromaconv::data::{hue_orbit_fixture, load_idx, write_dataset, LabeledHsl};
use chromaconv::groups::GroupSpec;
use chromaconv::models::{Model, ModelConfig};
use chromaconv::train::{save_checkpoint, AdamState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (images, labels) =
        load_idx(&root.join("train-images-idx3-ubyte.gz"), &root.join("train-labels-idx1-ubyte.gz"))
            .unwrap();
    let (digit, label) = (&images[7], labels[7]);

    let out = std::env::temp_dir().join("chromaconv-example-sort");
    fs::create_dir_all(&out).unwrap();

    let n = 4;
    let cfg = ModelConfig { group: GroupSpec::hue(n), widths: vec![8; 7], seed: 3, ..Default::default() };
    let model = Model::build(cfg).unwrap();
    let ckpt = out.join("untrained.ckpt");
    let rng = ChaCha8Rng::seed_from_u64(0);
    save_checkpoint(&ckpt, &model, &AdamState::new(&model), &rng, 0, &model.config.to_kv_text())
        .unwrap();

    let fixture = hue_orbit_fixture(digit, label, n, 10, 12);
    let examples: Vec<LabeledHsl> = fixture.iter().map(|(e, _)| e.clone()).collect();
    let data = out.join("orbit.hsl1");
    write_dataset(&data, &examples).unwrap();

    let sorted = cmd_sort_hue(&ckpt, &data, label, None, &out).unwrap();
    println!("rank  id  matched shift  residual  true hue (grid units)");
    for (rank, row) in sorted.rows.iter().enumerate() {
        println!(
            "{:>4}  {:>2}  {:>13}  {:>8.3}  {:.3}",
            rank, row.id, row.shift, row.residual, fixture[row.id as usize].1
        );
    }
    println!("index: {}", sorted.index_path.display());
    println!("strip: {} (open to see the ring)", sorted.grid_path.display());
}
