// Shared helpers for the integration suites. The reference computations in
// here are written from the definitions (nested loops, central differences)
// on purpose, so they exercise none of the library's fast paths.

#![allow(dead_code)]

use chromaconv::colorspace::HslImage;
use chromaconv::data::{load_idx, GrayImage};
use chromaconv::tensor::{Graph, NodeId, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

pub fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

pub fn rand_hsl<R: Rng>(rng: &mut R, height: usize, width: usize) -> HslImage {
    rand_hsl_sat_band(rng, height, width, 0.0, 255.0)
}

/// Random image whose saturation stays inside [s_lo, s_hi), for tests that
/// must avoid the clamp at the channel bounds.
pub fn rand_hsl_sat_band<R: Rng>(
    rng: &mut R,
    height: usize,
    width: usize,
    s_lo: f64,
    s_hi: f64,
) -> HslImage {
    let n = height * width;
    HslImage {
        height,
        width,
        h: (0..n).map(|_| rng.gen_range(0.0..255.0)).collect(),
        s: (0..n).map(|_| rng.gen_range(s_lo..s_hi)).collect(),
        l: (0..n).map(|_| rng.gen_range(0.0..255.0)).collect(),
    }
}

/// Largest per-pixel difference between two images across all three planes.
pub fn image_gap(a: &HslImage, b: &HslImage) -> f64 {
    assert_eq!((a.height, a.width), (b.height, b.width));
    let plane = |x: &[f64], y: &[f64]| {
        x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0f64, f64::max)
    };
    plane(&a.h, &b.h).max(plane(&a.s, &b.s)).max(plane(&a.l, &b.l))
}

pub fn max_abs_gap(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs() as f64)
        .fold(0.0f64, f64::max)
}

fn out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Plain cross-correlation written as four nested loops with a wide
/// accumulator. x: [b, c_in, h, w], w: [c_out, c_in, k, k].
pub fn ref_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], ci);
    let (ho, wo) = (out_len(h, k, stride, pad), out_len(wd, k, stride, pad));
    let mut out = vec![0.0f32; b * co * ho * wo];
    for bi in 0..b {
        for o in 0..co {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0f64;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.at(&[bi, c, iy as usize, ix as usize]) as f64;
                                let wv = w.at(&[o, c, ky, kx]) as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * co + o) * ho + y) * wo + xo] = acc as f32;
                }
            }
        }
    }
    Tensor::new(&[b, co, ho, wo], out)
}

/// Brute-force cyclic group convolution: output slot r accumulates, over
/// every input slot s, the spatial correlation of input slot s with filter
/// slot (s - r) mod n. f: [b, n*c_in, h, w], w: [c_out, n, c_in, k, k].
pub fn oracle_gconv_hue(f: &Tensor, w: &Tensor, n: usize, stride: usize, pad: usize) -> Tensor {
    let (fs, ws) = (f.shape(), w.shape());
    assert_eq!(ws[1], n);
    assert_eq!(fs[1] % n, 0);
    let (b, h, wd) = (fs[0], fs[2], fs[3]);
    let (ci, co, k) = (fs[1] / n, ws[0], ws[3]);
    assert_eq!(ws[2], ci);
    let (ho, wo) = (out_len(h, k, stride, pad), out_len(wd, k, stride, pad));
    let mut out = vec![0.0f32; b * n * co * ho * wo];
    for bi in 0..b {
        for r in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut acc = 0.0f64;
                        for s in 0..n {
                            let fslot = (s + n - r) % n;
                            for c in 0..ci {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xo * stride + kx) as isize - pad as isize;
                                        if iy < 0
                                            || ix < 0
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let fv = f.at(&[
                                            bi,
                                            s * ci + c,
                                            iy as usize,
                                            ix as usize,
                                        ]) as f64;
                                        let wv = w.at(&[o, fslot, c, ky, kx]) as f64;
                                        acc += fv * wv;
                                    }
                                }
                            }
                        }
                        out[((bi * (n * co) + r * co + o) * ho + y) * wo + xo] = acc as f32;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, n * co, ho, wo], out)
}

/// Brute-force truncated group convolution on the saturation axis: output
/// slot j accumulates conv(f[j + i], w[i]) over the offsets i in [-r, r]
/// that keep j + i inside [0, m), rescaled by T / |valid| so edge slots keep
/// the activation scale of interior ones. f: [b, m*c_in, h, w],
/// w: [c_out, 2r+1, c_in, k, k] with filter slot r + i holding offset i.
pub fn oracle_gconv_sat(
    f: &Tensor,
    w: &Tensor,
    m: usize,
    radius: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (fs, ws) = (f.shape(), w.shape());
    let t = 2 * radius + 1;
    assert_eq!(ws[1], t);
    assert_eq!(fs[1] % m, 0);
    let (b, h, wd) = (fs[0], fs[2], fs[3]);
    let (ci, co, k) = (fs[1] / m, ws[0], ws[3]);
    assert_eq!(ws[2], ci);
    let (ho, wo) = (out_len(h, k, stride, pad), out_len(wd, k, stride, pad));
    let mut out = vec![0.0f32; b * m * co * ho * wo];
    for bi in 0..b {
        for j in 0..m {
            let valid: Vec<isize> = (-(radius as isize)..=radius as isize)
                .filter(|&i| {
                    let at = j as isize + i;
                    at >= 0 && at < m as isize
                })
                .collect();
            let scale = (t as f32 / valid.len() as f32) as f64;
            for o in 0..co {
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut acc = 0.0f64;
                        for &i in &valid {
                            let s = (j as isize + i) as usize;
                            let fslot = (i + radius as isize) as usize;
                            for c in 0..ci {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xo * stride + kx) as isize - pad as isize;
                                        if iy < 0
                                            || ix < 0
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let fv = f.at(&[
                                            bi,
                                            s * ci + c,
                                            iy as usize,
                                            ix as usize,
                                        ]) as f64;
                                        let wv = w.at(&[o, fslot, c, ky, kx]) as f64;
                                        acc += fv * wv * scale;
                                    }
                                }
                            }
                        }
                        out[((bi * (m * co) + j * co + o) * ho + y) * wo + xo] = acc as f32;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, m * co, ho, wo], out)
}

/// Product-group brute force: the cyclic rule on the hue factor combined
/// with the truncated rule on the saturation factor. Slots flatten hue-major
/// (slot = n_idx * m + m_idx); filter slots flatten the same way over
/// (hue filter index, offset index).
pub fn oracle_gconv_product(
    f: &Tensor,
    w: &Tensor,
    n: usize,
    m: usize,
    radius: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (fs, ws) = (f.shape(), w.shape());
    let t = 2 * radius + 1;
    assert_eq!(ws[1], n * t);
    assert_eq!(fs[1] % (n * m), 0);
    let (b, h, wd) = (fs[0], fs[2], fs[3]);
    let (ci, co, k) = (fs[1] / (n * m), ws[0], ws[3]);
    let (ho, wo) = (out_len(h, k, stride, pad), out_len(wd, k, stride, pad));
    let mut out = vec![0.0f32; b * n * m * co * ho * wo];
    for bi in 0..b {
        for rn in 0..n {
            for j in 0..m {
                let valid: Vec<isize> = (-(radius as isize)..=radius as isize)
                    .filter(|&i| {
                        let at = j as isize + i;
                        at >= 0 && at < m as isize
                    })
                    .collect();
                let scale = (t as f32 / valid.len() as f32) as f64;
                for o in 0..co {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let mut acc = 0.0f64;
                            for sn in 0..n {
                                let hue_fslot = (sn + n - rn) % n;
                                for &i in &valid {
                                    let sm = (j as isize + i) as usize;
                                    let fslot = hue_fslot * t + (i + radius as isize) as usize;
                                    let in_slot = sn * m + sm;
                                    for c in 0..ci {
                                        for ky in 0..k {
                                            for kx in 0..k {
                                                let iy =
                                                    (y * stride + ky) as isize - pad as isize;
                                                let ix =
                                                    (xo * stride + kx) as isize - pad as isize;
                                                if iy < 0
                                                    || ix < 0
                                                    || iy >= h as isize
                                                    || ix >= wd as isize
                                                {
                                                    continue;
                                                }
                                                let fv = f.at(&[
                                                    bi,
                                                    in_slot * ci + c,
                                                    iy as usize,
                                                    ix as usize,
                                                ])
                                                    as f64;
                                                let wv =
                                                    w.at(&[o, fslot, c, ky, kx]) as f64;
                                                acc += fv * wv * scale;
                                            }
                                        }
                                    }
                                }
                            }
                            let slot = rn * m + j;
                            out[((bi * (n * m * co) + slot * co + o) * ho + y) * wo + xo] =
                                acc as f32;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, n * m * co, ho, wo], out)
}

/// Worst disagreement found by [`fd_check`], with enough context to tell a
/// wrong derivative from a finite-difference artifact.
#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    /// Largest per-element ratio |a - n| / max(|a|, |n|, floor).
    pub worst: f64,
    pub leaf: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest per-leaf norm ratio ||a - n||_inf / max(||a||_inf, ||n||_inf).
    /// The right yardstick for deep compositions, where the per-element
    /// ratio of a near-zero entry reports the forward pass's rounding
    /// rather than the backward pass's correctness.
    pub worst_norm_ratio: f64,
}

/// Central-difference gradient check. `build` assembles a scalar loss from
/// leaves handed to it in the order of `inputs`; the harness differentiates
/// once analytically, then re-evaluates the loss twice per input element.
///
/// Comparison is relative with a floor: each element's difference is divided
/// by max(|analytic|, |numeric|, floor), where floor is 1% of the largest
/// gradient in that leaf (at least 1e-4). Entries far below the leaf's
/// gradient scale carry mostly single-precision noise, so holding them to a
/// pure ratio would test the rounding of the forward pass, not the backward
/// one.
pub fn fd_check<F>(inputs: &[Tensor], eps: f32, build: F) -> FdReport
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids);
    assert_eq!(g.value(loss).numel(), 1, "gradient checks need a scalar loss");
    g.backward(loss);
    let grads: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("leaf missing gradient").to_vec())
        .collect();

    let eval = |leaf: usize, element: usize, value: f32| -> f64 {
        let mut g2 = Graph::new();
        let ids2: Vec<NodeId> = inputs
            .iter()
            .enumerate()
            .map(|(li, t)| {
                let mut t = t.clone();
                if li == leaf {
                    t.data_mut()[element] = value;
                }
                g2.leaf(t, false)
            })
            .collect();
        let l = build(&mut g2, &ids2);
        g2.value(l).item() as f64
    };

    let mut report = FdReport {
        worst: 0.0,
        leaf: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        worst_norm_ratio: 0.0,
    };
    for (li, t) in inputs.iter().enumerate() {
        let leaf_scale = grads[li].iter().map(|g| g.abs() as f64).fold(0.0f64, f64::max);
        let floor = (0.01 * leaf_scale).max(1e-4);
        let mut leaf_diff = 0.0f64;
        let mut leaf_norm = leaf_scale;
        for e in 0..t.numel() {
            let x0 = t.data()[e];
            let plus = eval(li, e, x0 + eps);
            let minus = eval(li, e, x0 - eps);
            let numeric = (plus - minus) / (2.0 * eps as f64);
            let analytic = grads[li][e] as f64;
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let ratio = (analytic - numeric).abs() / denom;
            if ratio > report.worst {
                report.worst = ratio;
                report.leaf = li;
                report.element = e;
                report.analytic = analytic;
                report.numeric = numeric;
            }
            leaf_diff = leaf_diff.max((analytic - numeric).abs());
            leaf_norm = leaf_norm.max(numeric.abs());
        }
        let norm_ratio = leaf_diff / leaf_norm.max(1e-12);
        report.worst_norm_ratio = report.worst_norm_ratio.max(norm_ratio);
    }
    report
}

pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn load_mnist_train() -> Vec<(GrayImage, u8)> {
    let dir = mnist_dir();
    let (imgs, labels) = load_idx(
        &dir.join("train-images-idx3-ubyte.gz"),
        &dir.join("train-labels-idx1-ubyte.gz"),
    )
    .expect("train fixture");
    imgs.into_iter().zip(labels).collect()
}

pub fn load_mnist_test() -> Vec<(GrayImage, u8)> {
    let dir = mnist_dir();
    let (imgs, labels) = load_idx(
        &dir.join("t10k-images-idx3-ubyte.gz"),
        &dir.join("t10k-labels-idx1-ubyte.gz"),
    )
    .expect("test fixture");
    imgs.into_iter().zip(labels).collect()
}

/// Deterministic generator for test data; the fixed stream keeps results
/// independent of call order.
pub fn test_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fresh scratch directory under the target dir, cleared on entry.
pub fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/it-scratch")
        .join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
