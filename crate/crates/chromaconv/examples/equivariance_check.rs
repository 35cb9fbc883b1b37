//! Layer-by-layer equivariance audit of a freshly initialized network.
//!
//! For every nonidentity group element: transform the input, rerun the
//! model, and compare each layer's output against the slot-permuted
//! original. Gaps should sit at float-rounding scale. A deliberately broken
//! model (per-slot bias smuggled into one batchnorm) is checked last to
//! show the audit actually catches violations.

use chromaconv::cli::{random_verify_images, verify_model};
use chromaconv::groups::GroupSpec;
use chromaconv::models::{Defect, Model, ModelConfig};

fn audit(cfg: ModelConfig, tag: &str) {
    let model = Model::build(cfg).unwrap();
    let images = random_verify_images(&model.config.group, 4, 16, 16, 99).unwrap();
    let report = verify_model(&model, &images, 1e-4);
    println!("{} ({} params)", tag, model.param_count());
    for elem in &report.elements {
        let worst = elem
            .gaps
            .iter()
            .filter_map(|g| g.gap)
            .fold(0.0f64, f64::max);
        println!("  element {:>8}: worst layer gap {:.3e}", elem.element, worst);
    }
    println!("  => {}\n", if report.pass { "EQUIVARIANT" } else { "VIOLATION" });
}

fn main() {
    audit(
        ModelConfig { group: GroupSpec::hue(3), seed: 7, ..Default::default() },
        "hue(3) z2cnn",
    );
    audit(
        ModelConfig { group: GroupSpec::hue(4), seed: 8, ..Default::default() },
        "hue(4) z2cnn",
    );
    // saturation slots truncate at the boundary, so the harness only
    // compares slots whose orbit stayed in range
    audit(
        ModelConfig { group: GroupSpec::sat(0.05, 5), seed: 9, ..Default::default() },
        "sat(5) z2cnn",
    );
    audit(
        ModelConfig { group: GroupSpec::product(2, 0.05, 3), seed: 10, ..Default::default() },
        "hue(2) x sat(3) z2cnn",
    );
    audit(
        ModelConfig {
            group: GroupSpec::hue(3),
            defect: Defect::PerSlotBias,
            seed: 7,
            ..Default::default()
        },
        "hue(3) with a per-slot bias defect",
    );
}
