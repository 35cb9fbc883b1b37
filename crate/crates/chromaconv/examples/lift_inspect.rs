//! What the lifting layer actually produces.
//!
//! A planar network sees one image; a group network sees one copy per group
//! element, stacked along the channel axis. Each slot is rendered to RGB in
//! [0, 1], so a hue shift reaches the network as a change of channel mix.
//! This walks the lifted tensor for a hue group and a hue x saturation
//! product, then confirms the key property that makes everything downstream
//! work: transforming the image and permuting the lifted slots are the same
//! operation.

use chromaconv::colorspace::act_hue;
use chromaconv::data::{colorize, load_idx};
use chromaconv::groups::{act_gmap_hue, GroupSpec};
use chromaconv::layers::lift;
use std::path::Path;

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (images, _) =
        load_idx(&root.join("train-images-idx3-ubyte.gz"), &root.join("train-labels-idx1-ubyte.gz"))
            .expect("MNIST fixture under data/mnist");
    let img = colorize(&images[3], 75.0);

    let hue3 = GroupSpec::hue(3);
    let lifted = lift(&[&img], &hue3);
    println!("hue(3) lift of one 28x28 image: {:?}", lifted.shape());
    println!("  3 slots x 3 channels (r, g, b), all in [0, 1]");
    let (hh, ww) = (lifted.shape()[2], lifted.shape()[3]);
    for slot in 0..3 {
        // the digit starts yellow-green; each slot rotates it a third of a
        // turn further, so the dominant channel walks g -> b -> r
        let mut means = [0.0f64; 3];
        for (c, m) in means.iter_mut().enumerate() {
            for y in 0..hh {
                for x in 0..ww {
                    *m += lifted.at(&[0, slot * 3 + c, y, x]) as f64;
                }
            }
            *m /= (hh * ww) as f64;
        }
        println!(
            "  slot {}: channel means r {:.4}  g {:.4}  b {:.4}",
            slot, means[0], means[1], means[2]
        );
    }

    // lifting a rotated image = slot-permuting the lifted original
    let step = 255.0 / 3.0;
    let lifted_rotated = lift(&[&act_hue(step, &img)], &hue3);
    let permuted = act_gmap_hue(3, 1, &lifted);
    println!(
        "lift(rotate(x)) vs permute(lift(x)): gap {:.2e}",
        lifted_rotated.max_abs_diff(&permuted)
    );

    let product = GroupSpec::product(3, 0.1, 3);
    let lp = lift(&[&img], &product);
    println!("hue(3) x sat(3) lift: {:?} (9 slots, hue-major order)", lp.shape());
}
