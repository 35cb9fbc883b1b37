//! Hue and saturation actions on a colorized MNIST digit.
//!
//! Loads one digit, paints it at a base hue, then walks the hue circle and
//! the saturation line, writing a PPM strip of each orbit. Also spot-checks
//! the group laws (identity, composition, inverse) numerically.

use chromaconv::colorspace::{act_hue, act_hue_sat, act_sat, hsl_to_rgb, tile_grid, HslImage};
use chromaconv::data::{colorize, load_idx};
use std::path::Path;

fn max_gap(a: &HslImage, b: &HslImage) -> f64 {
    let planes = [(&a.h, &b.h), (&a.s, &b.s), (&a.l, &b.l)];
    planes
        .iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (images, labels) =
        load_idx(&root.join("train-images-idx3-ubyte.gz"), &root.join("train-labels-idx1-ubyte.gz"))
            .expect("MNIST fixture under data/mnist");
    println!("loaded {} training digits, first label {}", images.len(), labels[0]);

    let base = colorize(&images[0], 30.0);

    // hue orbit: 8 steps of 1/8 turn each
    let n = 8;
    let step = 255.0 / n as f64;
    let orbit: Vec<_> = (0..n).map(|i| hsl_to_rgb(&act_hue(i as f64 * step, &base))).collect();
    std::fs::write("hue-orbit.ppm", tile_grid(&orbit, n).to_ppm()).unwrap();
    println!("wrote hue-orbit.ppm ({} rotations of the same digit)", n);

    // saturation orbit: five steps toward gray, clamped at zero
    let sat: Vec<_> =
        (0..5).map(|j| hsl_to_rgb(&act_sat(-0.2 * j as f64 * 255.0, &base))).collect();
    std::fs::write("sat-orbit.ppm", tile_grid(&sat, 5).to_ppm()).unwrap();
    println!("wrote sat-orbit.ppm (draining saturation)");

    // group laws on the hue circle
    let full_turn = act_hue(255.0, &base);
    println!("identity (full turn):   gap {:.2e}", max_gap(&base, &full_turn));
    let ab = act_hue(2.0 * step, &act_hue(3.0 * step, &base));
    let combined = act_hue(5.0 * step, &base);
    println!("composition (2+3 = 5):  gap {:.2e}", max_gap(&ab, &combined));
    let back = act_hue(255.0 - 3.0 * step, &act_hue(3.0 * step, &base));
    println!("inverse (3 then -3):    gap {:.2e}", max_gap(&base, &back));

    // the joint action commutes: hue then sat equals sat then hue
    let hs = act_hue_sat(step, 0.1 * 255.0, &base);
    let sh = act_sat(0.1 * 255.0, &act_hue(step, &base));
    println!("hue/sat commutation:    gap {:.2e}", max_gap(&hs, &sh));
}
