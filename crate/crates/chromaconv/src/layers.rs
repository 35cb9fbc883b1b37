//! Equivariant layers: lifting, group convolution, group batch
//! normalization, and group pooling.
//!
//! A lifted feature map is a function on Z^2 x G held as a 4-d tape tensor
//! [B, |G|*C, H, W]; that buffer is row-major identical to the canonical
//! B x |G| x C x H x W view, so slot g / channel c lives at channel index
//! g*C + c. [`GFeatureMap`] carries the slot metadata alongside the node.
//!
//! Layer-construction rule: pointwise nonlinearities and slot-wise spatial
//! pooling commute with the slot permutations and shifts of the group
//! actions, so stacks built from the pieces here stay equivariant end to end.

use rand::Rng;

use crate::colorspace::{act_hue_sat, hsl_to_rgb, HslImage};
use crate::groups::GroupSpec;
use crate::tensor::{BnMode, Graph, NodeId, Padding, Tensor};

/// A tape node carrying a group-structured feature map.
#[derive(Clone, Copy, Debug)]
pub struct GFeatureMap {
    pub node: NodeId,
    /// Group-axis length |G|.
    pub slots: usize,
    /// Channels per slot.
    pub channels: usize,
}

impl GFeatureMap {
    pub fn new(g: &Graph, node: NodeId, slots: usize) -> Self {
        let sh = g.value(node).shape();
        assert_eq!(sh.len(), 4, "feature maps are 4-d");
        assert_eq!(sh[1] % slots, 0, "channel axis must split into {} slots", slots);
        GFeatureMap { node, slots, channels: sh[1] / slots }
    }
}

/// Filter bank of one group-convolution layer: weights
/// [c_out, filter_slots, c_in, k, k] plus optional bias [c_out].
#[derive(Clone, Debug)]
pub struct GFilterBank {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl GFilterBank {
    /// Fan-in-scaled uniform init on ±sqrt(6 / fan_in); fan_in counts the
    /// filter's group-axis support so activation variance stays group-size
    /// independent.
    pub fn init<R: Rng>(
        rng: &mut R,
        c_out: usize,
        filter_slots: usize,
        c_in: usize,
        k: usize,
        with_bias: bool,
    ) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = filter_slots * c_in * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = c_out * filter_slots * c_in * k * k;
        let weights = Tensor::new(
            &[c_out, filter_slots, c_in, k, k],
            (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect(),
        );
        let bias = with_bias.then(|| Tensor::zeros(&[c_out]));
        GFilterBank { weights, bias }
    }
}

/// Lift a batch of HSL images onto the group: slot j holds the image
/// transformed by group element j, channels (hue, saturation, luminance)
/// scaled to [0, 1]. Output is [B, |G|*3, H, W].
///
/// The hue channel enters the network as a value like any other, constant
/// over the whole frame. A hue shift therefore reaches a planar model as a
/// full-field offset it was never trained to discount, while the group
/// slots turn the same offset into a permutation.
pub fn lift<T: std::borrow::Borrow<HslImage>>(images: &[T], spec: &GroupSpec) -> Tensor {
    assert!(!images.is_empty(), "empty batch");
    let (h, w) = (images[0].borrow().height, images[0].borrow().width);
    assert!(
        images.iter().all(|m| m.borrow().height == h && m.borrow().width == w),
        "batch dims must agree"
    );
    let elements = spec.lift_elements();
    let g = elements.len();
    let hw = h * w;
    let mut out = vec![0.0f32; images.len() * g * 3 * hw];
    for (bi, img) in images.iter().enumerate() {
        for (j, &(hue_shift, sat_shift)) in elements.iter().enumerate() {
            let moved = act_hue_sat(hue_shift, sat_shift, img.borrow());
            let base = (bi * g + j) * 3 * hw;
            for (plane_idx, plane) in [&moved.h, &moved.s, &moved.l].into_iter().enumerate() {
                let dst = base + plane_idx * hw;
                for (i, &v) in plane.iter().enumerate() {
                    out[dst + i] = (v / 255.0) as f32;
                }
            }
        }
    }
    Tensor::new(&[images.len(), g * 3, h, w], out)
}

pub fn lift_hue(images: &[HslImage], n: usize) -> Tensor {
    lift(images, &GroupSpec::hue(n))
}

pub fn lift_sat(images: &[HslImage], spec: &crate::groups::SatGroupSpec) -> Tensor {
    lift(images, &GroupSpec::Sat(spec.clone()))
}

pub fn lift_hue_sat(images: &[HslImage], spec: &crate::groups::ProductGroupSpec) -> Tensor {
    lift(images, &GroupSpec::Product(spec.clone()))
}

/// Group convolution: expand the filter bank along its orbit, then run one
/// planar convolution over the flattened slot-channel axis. With the trivial
/// group this reduces to conv2d on identical weights, bitwise.
pub fn gconv(
    g: &mut Graph,
    f: &GFeatureMap,
    weights: NodeId,
    bias: Option<NodeId>,
    spec: &GroupSpec,
    stride: usize,
    padding: Padding,
) -> GFeatureMap {
    let plan = spec.orbit_plan();
    assert_eq!(f.slots, plan.slots_in, "feature map group axis does not match the group");
    let ws = g.value(weights).shape().to_vec();
    assert_eq!(ws.len(), 5, "group filter banks are 5-d");
    assert_eq!(ws[1], spec.filter_slots(), "filter bank group support mismatch");
    assert_eq!(ws[2], f.channels, "filter bank input channels mismatch");
    let c_out = ws[0];
    let big = g.orbit_expand(weights, &plan);
    let mut out = g.conv2d(f.node, big, stride, padding);
    if let Some(b) = bias {
        out = g.add_channel_bias(out, b);
    }
    GFeatureMap { node: out, slots: plan.slots_out, channels: c_out }
}

/// Batch normalization with statistics and affine parameters shared across
/// the group axis, the unique placement that keeps the layer equivariant.
pub fn group_batchnorm(
    g: &mut Graph,
    f: &GFeatureMap,
    scale: NodeId,
    bias: NodeId,
    eps: f64,
    mode: BnMode,
) -> GFeatureMap {
    let node = g.batchnorm(f.node, scale, bias, f.slots, eps, mode);
    GFeatureMap { node, ..*f }
}

/// Slot-wise ReLU.
pub fn grelu(g: &mut Graph, f: &GFeatureMap) -> GFeatureMap {
    GFeatureMap { node: g.relu(f.node), ..*f }
}

/// Slot-wise non-overlapping spatial max pooling.
pub fn gmaxpool(g: &mut Graph, f: &GFeatureMap, k: usize) -> GFeatureMap {
    GFeatureMap { node: g.maxpool2d(f.node, k), ..*f }
}

/// Max over the group axis, producing a group-invariant planar map
/// [B, C, H, W].
pub fn group_pool(g: &mut Graph, f: &GFeatureMap) -> NodeId {
    g.group_maxpool(f.node, f.slots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::act_hue;
    use crate::groups::{act_gmap_hue, act_gmap_sat, SatGroupSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hsl(rng: &mut ChaCha8Rng, h: usize, w: usize) -> HslImage {
        HslImage::new(
            h,
            w,
            (0..h * w).map(|_| rng.gen_range(0.0..255.0)).collect(),
            (0..h * w).map(|_| rng.gen_range(0.0..=255.0)).collect(),
            (0..h * w).map(|_| rng.gen_range(0.0..=255.0)).collect(),
        )
    }

    /// Hue plane snapped to the n-element grid so the finite action is exact.
    fn grid_hsl(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> HslImage {
        let mut img = random_hsl(rng, h, w);
        for v in &mut img.h {
            *v = (rng.gen_range(0..n) as f64) * 255.0 / n as f64;
        }
        img
    }

    #[test]
    fn trivial_lift_is_scaled_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = random_hsl(&mut rng, 3, 4);
        let t = lift(&[img.clone()], &GroupSpec::Trivial);
        assert_eq!(t.shape(), &[1, 3, 3, 4]);
        for (i, &v) in img.h.iter().enumerate() {
            assert_eq!(t.data()[i], (v / 255.0) as f32);
        }
        for (i, &v) in img.l.iter().enumerate() {
            assert_eq!(t.data()[2 * 12 + i], (v / 255.0) as f32);
        }
    }

    #[test]
    fn hue_lift_slots_step_the_hue_plane() {
        // slot j of a 3-lift shifts hue by j * 85 = j thirds of the wheel;
        // saturation and luminance ride along untouched
        let img = HslImage::new(1, 1, vec![0.0], vec![255.0], vec![127.5]);
        let t = lift_hue(&[img], 3);
        assert_eq!(t.shape(), &[1, 9, 1, 1]);
        for slot in 0..3usize {
            let want_h = (slot as f64 * 85.0 / 255.0) as f32;
            assert!((t.data()[slot * 3] - want_h).abs() < 1e-7, "slot {} hue", slot);
            assert_eq!(t.data()[slot * 3 + 1], 1.0, "slot {} saturation", slot);
            assert_eq!(t.data()[slot * 3 + 2], 0.5, "slot {} luminance", slot);
        }
    }

    #[test]
    fn hue_lift_commutes_with_hue_action_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for n in [1usize, 3, 4] {
            let imgs: Vec<HslImage> = (0..2).map(|_| grid_hsl(&mut rng, 5, 5, n)).collect();
            let lifted = lift_hue(&imgs, n);
            for m in 0..n {
                let shift = m as f64 * 255.0 / n as f64;
                let moved: Vec<HslImage> = imgs.iter().map(|im| act_hue(shift, im)).collect();
                let lift_after = lift_hue(&moved, n);
                let act_after = act_gmap_hue(n, m, &lifted);
                assert!(
                    lift_after.max_abs_diff(&act_after) <= 1e-6,
                    "lift equivariance broke at n={} m={}",
                    n,
                    m
                );
            }
        }
    }

    #[test]
    fn sat_lift_slots_apply_centered_shifts() {
        let spec = SatGroupSpec::new(0.1, 3);
        let img = HslImage::new(1, 1, vec![10.0], vec![100.0], vec![50.0]);
        let t = lift_sat(&[img.clone()], &spec);
        // slots render the image at saturation shifts -25.5, 0, +25.5
        for (slot, shift) in [(0usize, -25.5), (1, 0.0), (2, 25.5)] {
            let want = hsl_to_rgb(&crate::colorspace::act_sat(shift, &img));
            for (c, plane) in [&want.r, &want.g, &want.b].into_iter().enumerate() {
                let got = t.data()[slot * 3 + c];
                assert!(
                    (got - (plane[0] / 255.0) as f32).abs() < 1e-7,
                    "slot {} channel {}",
                    slot,
                    c
                );
            }
        }
    }

    #[test]
    fn sat_lift_commutes_on_non_clamping_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let spec = SatGroupSpec::new(0.05, 5);
        // saturations kept far from both clamp boundaries
        let mut img = random_hsl(&mut rng, 4, 4);
        for v in &mut img.s {
            *v = rng.gen_range(100.0..150.0);
        }
        let lifted = lift_sat(&[img.clone()], &spec);
        let m = 1isize;
        let moved = crate::colorspace::act_sat(spec.element_value(m), &img);
        let lift_after = lift_sat(&[moved], &spec);
        let act_after = act_gmap_sat(5, m, &lifted);
        // compare slots whose content on both sides is genuine shifted data
        let block = 3 * 16;
        for slot in 0..4 {
            let a = &lift_after.data()[slot * block..(slot + 1) * block];
            let b = &act_after.data()[slot * block..(slot + 1) * block];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-6, "slot {} mismatch", slot);
            }
        }
    }

    #[test]
    fn gconv_on_trivial_group_is_conv2d_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut g = Graph::new();
        let xdata: Vec<f32> = (0..2 * 3 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wdata: Vec<f32> = (0..4 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = g.leaf(Tensor::new(&[2, 3, 6, 6], xdata), false);
        let w5 = g.leaf(Tensor::new(&[4, 1, 3, 3, 3], wdata.clone()), false);
        let w4 = g.leaf(Tensor::new(&[4, 3, 3, 3], wdata), false);
        let f = GFeatureMap::new(&g, x, 1);
        let grouped = gconv(&mut g, &f, w5, None, &GroupSpec::Trivial, 1, Padding::Same);
        let planar = g.conv2d(x, w4, 1, Padding::Same);
        assert_eq!(g.value(grouped.node).data(), g.value(planar).data());
        assert_eq!(grouped.slots, 1);
    }

    #[test]
    fn gconv_hue_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let n = 3;
        let mut g = Graph::new();
        let xdata: Vec<f32> = (0..n * 2 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wdata: Vec<f32> = (0..4 * n * 2 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let x = g.leaf(Tensor::new(&[1, n * 2, 5, 5], xdata), false);
        let w = g.leaf(Tensor::new(&[4, n, 2, 3, 3], wdata), false);
        let spec = GroupSpec::hue(n);
        let f = GFeatureMap::new(&g, x, n);
        let out = gconv(&mut g, &f, w, None, &spec, 1, Padding::Same);
        for m in 0..n {
            let shifted_in = act_gmap_hue(n, m, g.value(x));
            let xs = g.leaf(shifted_in, false);
            let fs = GFeatureMap::new(&g, xs, n);
            let out_of_shifted = gconv(&mut g, &fs, w, None, &spec, 1, Padding::Same);
            let shifted_out = act_gmap_hue(n, m, g.value(out.node));
            let diff = g.value(out_of_shifted.node).max_abs_diff(&shifted_out);
            assert!(diff <= 1e-4, "hue equivariance gap {} at m={}", diff, m);
        }
    }

    #[test]
    fn group_pool_is_invariant_under_hue_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let n = 4;
        let mut g = Graph::new();
        let xdata: Vec<f32> = (0..n * 3 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = g.leaf(Tensor::new(&[1, n * 3, 4, 4], xdata), false);
        let f = GFeatureMap::new(&g, x, n);
        let pooled = group_pool(&mut g, &f);
        for m in 0..n {
            let moved = act_gmap_hue(n, m, g.value(x));
            let xs = g.leaf(moved, false);
            let fs = GFeatureMap::new(&g, xs, n);
            let pooled_s = group_pool(&mut g, &fs);
            assert_eq!(g.value(pooled).data(), g.value(pooled_s).data());
        }
    }

    #[test]
    fn group_batchnorm_commutes_with_hue_action_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let n = 3;
        let mut g = Graph::new();
        let xdata: Vec<f32> = (0..2 * n * 2 * 3 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = g.leaf(Tensor::new(&[2, n * 2, 3, 3], xdata), false);
        let sc = g.leaf(Tensor::new(&[2], vec![1.3, 0.7]), false);
        let bi = g.leaf(Tensor::new(&[2], vec![0.1, -0.2]), false);
        let f = GFeatureMap::new(&g, x, n);
        let y = group_batchnorm(&mut g, &f, sc, bi, 1e-5, BnMode::Train);
        for m in 0..n {
            let moved = act_gmap_hue(n, m, g.value(x));
            let xs = g.leaf(moved, false);
            let fs = GFeatureMap::new(&g, xs, n);
            let ys = group_batchnorm(&mut g, &fs, sc, bi, 1e-5, BnMode::Train);
            let expected = act_gmap_hue(n, m, g.value(y.node));
            assert_eq!(
                g.value(ys.node).data(),
                expected.data(),
                "batchnorm must commute with slot permutation exactly (m={})",
                m
            );
        }
    }

    #[test]
    fn group_batchnorm_normalizes_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut g = Graph::new();
        let xdata: Vec<f32> = (0..4 * 2 * 8 * 8).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let x = g.leaf(Tensor::new(&[4, 2, 8, 8], xdata), false);
        let sc = g.leaf(Tensor::new(&[2], vec![1.5, 0.5]), false);
        let bi = g.leaf(Tensor::new(&[2], vec![0.3, -0.4]), false);
        let f = GFeatureMap::new(&g, x, 1);
        let y = group_batchnorm(&mut g, &f, sc, bi, 1e-5, BnMode::Train);
        let yd = g.value(y.node).data();
        let scales = [1.5f64, 0.5];
        let biases = [0.3f64, -0.4];
        for c in 0..2 {
            let mut vals = Vec::new();
            for b in 0..4 {
                let off = (b * 2 + c) * 64;
                vals.extend(yd[off..off + 64].iter().map(|&v| v as f64));
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!((mean - biases[c]).abs() < 1e-3, "channel {} mean {}", c, mean);
            assert!((var.sqrt() - scales[c]).abs() < 1e-3, "channel {} std {}", c, var.sqrt());
        }
    }
}
