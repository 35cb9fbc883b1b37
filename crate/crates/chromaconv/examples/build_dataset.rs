//! Colorized dataset construction and the HSL1 on-disk format.
//!
//! Takes grayscale MNIST digits, paints each one at a hue drawn from a
//! seeded per-example stream, writes the split with its manifest sidecar,
//! and reads everything back. The hue draw depends only on (seed, index),
//! so regenerating any subset reproduces the same colors, and a second
//! write of the same split is byte-identical; the manifest's sha256 can
//! tell two splits apart without parsing them.

use chromaconv::data::{
    load_idx, make_split, manifest_path, read_dataset, sample_grid_ppm, sha256_hex,
    write_split_with_manifest, DatasetManifest, SUBSET_A_DEG,
};
use std::fs;
use std::path::Path;

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (images, labels) =
        load_idx(&root.join("train-images-idx3-ubyte.gz"), &root.join("train-labels-idx1-ubyte.gz"))
            .expect("MNIST fixture under data/mnist");
    let source: Vec<_> = images.into_iter().zip(labels).take(256).collect();

    let (lo, hi) = SUBSET_A_DEG;
    let split = make_split(&source, lo, hi, 42);
    println!("colorized {} digits with hues in [{}, {}) degrees", split.len(), lo, hi);

    let out = std::env::temp_dir().join("chromaconv-example-dataset");
    fs::create_dir_all(&out).unwrap();
    let path = out.join("train-a.hsl1");
    let manifest = write_split_with_manifest(&path, "A", &split, lo, hi, 42).unwrap();
    println!("wrote {} ({} bytes)", path.display(), fs::metadata(&path).unwrap().len());
    print!("{}", manifest.to_text());

    // round trip: values survive, manifest reparses, digest still matches
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.len(), split.len());
    assert_eq!(back[17].label, split[17].label);
    assert_eq!(back[17].image.h, split[17].image.h);
    let reparsed =
        DatasetManifest::from_text(&fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
    assert_eq!(reparsed, manifest);
    assert_eq!(sha256_hex(&path).unwrap(), manifest.sha256);
    println!("round trip ok, digest verified");

    fs::write(out.join("preview.ppm"), sample_grid_ppm(&split, 64, 8)).unwrap();
    println!("preview grid at {}", out.join("preview.ppm").display());
}
