//! Central-difference audit of the gradient tape.
//!
//! Builds a miniature lift -> gconv -> relu -> pools -> linear ->
//! cross-entropy stack, backpropagates once, then nudges a sample of leaf
//! elements by +-eps and compares (loss(+) - loss(-)) / 2 eps against the
//! analytic gradient. Each leaf is judged by its worst absolute mismatch
//! relative to the leaf's largest gradient: per-element ratios on entries
//! whose gradient is thousands of times smaller than their neighbors'
//! measure f32 forward rounding, not backward correctness.

use chromaconv::colorspace::HslImage;
use chromaconv::groups::GroupSpec;
use chromaconv::layers::{gconv, grelu, group_pool, lift, GFeatureMap, GFilterBank};
use chromaconv::tensor::{Graph, NodeId, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f32 = 1e-2;

fn loss_for(leaves: &[Tensor], spec: &GroupSpec) -> (f64, Vec<Vec<f32>>) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let [x, w, lw, lb] = [ids[0], ids[1], ids[2], ids[3]];
    let fmap = GFeatureMap::new(&g, x, spec.order());
    let conv = gconv(&mut g, &fmap, w, None, spec, 1, Padding::Same);
    let act = grelu(&mut g, &conv);
    let pooled = group_pool(&mut g, &act);
    let flat = g.avgpool_spatial(pooled);
    let logits = g.linear(flat, lw, lb);
    let loss = g.softmax_cross_entropy(logits, &[1, 4]);
    g.backward(loss);
    let grads = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
    (g.value(loss).item() as f64, grads)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = GroupSpec::hue(3);

    // two random 6x6 images, lifted onto the group
    let px = 36;
    let imgs: Vec<HslImage> = (0..2)
        .map(|_| HslImage {
            height: 6,
            width: 6,
            h: (0..px).map(|_| rng.gen_range(0.0..255.0)).collect(),
            s: (0..px).map(|_| rng.gen_range(50.0..200.0)).collect(),
            l: (0..px).map(|_| rng.gen_range(30.0..220.0)).collect(),
        })
        .collect();
    let x = lift(&imgs, &spec);

    let bank = GFilterBank::init(&mut rng, 2, 3, 3, 3, false);
    let lw = Tensor::new(&[10, 2], (0..20).map(|_| rng.gen_range(-0.5..0.5)).collect());
    let lb = Tensor::zeros(&[10]);
    let leaves = vec![x, bank.weights, lw, lb];

    let (loss0, analytic) = loss_for(&leaves, &spec);
    println!("loss {:.6}, auditing {} leaves at eps {}", loss0, leaves.len(), EPS);

    let names = ["input", "gconv weights", "linear weights", "linear bias"];
    let mut worst = 0.0f64;
    for (li, name) in names.iter().enumerate() {
        let count = leaves[li].numel();
        let scale = analytic[li].iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
        let mut leaf_gap = 0.0f64;
        for _ in 0..30.min(count) {
            let e = rng.gen_range(0..count);
            let mut plus = leaves.clone();
            plus[li].data_mut()[e] += EPS;
            let mut minus = leaves.clone();
            minus[li].data_mut()[e] -= EPS;
            let numeric = (loss_for(&plus, &spec).0 - loss_for(&minus, &spec).0)
                / (2.0 * EPS as f64);
            leaf_gap = leaf_gap.max((analytic[li][e] as f64 - numeric).abs());
        }
        let ratio = leaf_gap / scale.max(1e-12);
        println!("  {:<14} worst |analytic - numeric| {:.3e} ({:.3e} of peak)", name, leaf_gap, ratio);
        worst = worst.max(ratio);
    }
    assert!(worst < 2e-2, "gradient mismatch");
    println!("all sampled gradients agree with central differences");
}
