//! Finite group structure for hue rotations, truncated saturation shifts,
//! and their product, plus the feature-map-space actions.
//!
//! Feature maps carry the group as a block structure on the channel axis:
//! the canonical view B x |G| x C x H x W is stored row-major, which is the
//! same memory layout as B x (|G|*C) x H x W. All actions here permute (or
//! zero-fill) whole slot blocks, so they are exact data movements.

use crate::tensor::{OrbitEntry, OrbitPlan, Tensor};

/// Cyclic hue group: element i shifts hue by i * 255 / n.
#[derive(Clone, Debug, PartialEq)]
pub struct HueGroupSpec {
    n: usize,
}

impl HueGroupSpec {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "hue group order must be positive");
        HueGroupSpec { n }
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn element_value(&self, i: usize) -> f64 {
        assert!(i < self.n);
        i as f64 * 255.0 / self.n as f64
    }

    pub fn compose(&self, i: usize, j: usize) -> usize {
        assert!(i < self.n && j < self.n);
        (i + j) % self.n
    }

    pub fn inverse(&self, i: usize) -> usize {
        assert!(i < self.n);
        (self.n - i) % self.n
    }
}

/// Truncated saturation-shift group: `positions` lifted copies centered on
/// zero shift, step `d` of the 255 scale per position, filters supported on
/// contiguous offsets {-radius..=radius}.
#[derive(Clone, Debug, PartialEq)]
pub struct SatGroupSpec {
    d: f64,
    positions: usize,
    radius: usize,
}

impl SatGroupSpec {
    pub fn new(d: f64, positions: usize) -> Self {
        Self::with_radius(d, positions, 1)
    }

    pub fn with_radius(d: f64, positions: usize, radius: usize) -> Self {
        assert!(d > 0.0 && d <= 1.0, "saturation step must lie in (0,1]");
        assert!(positions >= 1 && positions % 2 == 1, "position count must be odd");
        SatGroupSpec { d, positions, radius }
    }

    pub fn step(&self) -> f64 {
        self.d
    }

    /// Number of lifted copies (the group-axis length of feature maps).
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Filter support size T.
    pub fn offset_count(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn offsets(&self) -> impl Iterator<Item = isize> {
        -(self.radius as isize)..=self.radius as isize
    }

    /// Saturation shift applied at a given signed offset index.
    pub fn element_value(&self, i: isize) -> f64 {
        i as f64 * self.d * 255.0
    }

    /// Signed shift index carried by lift slot `pos` (slots center on zero).
    pub fn position_shift(&self, pos: usize) -> isize {
        assert!(pos < self.positions);
        pos as isize - (self.positions as isize - 1) / 2
    }
}

/// Product of hue and saturation groups; slot (n_idx, m_idx) flattens
/// row-major with hue as the outer axis: n_idx * positions + m_idx.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductGroupSpec {
    pub hue: HueGroupSpec,
    pub sat: SatGroupSpec,
}

impl ProductGroupSpec {
    pub fn new(hue: HueGroupSpec, sat: SatGroupSpec) -> Self {
        ProductGroupSpec { hue, sat }
    }

    pub fn order(&self) -> usize {
        self.hue.order() * self.sat.positions()
    }

    pub fn flatten(&self, n_idx: usize, m_idx: usize) -> usize {
        assert!(n_idx < self.hue.order() && m_idx < self.sat.positions());
        n_idx * self.sat.positions() + m_idx
    }

    pub fn unflatten(&self, g: usize) -> (usize, usize) {
        assert!(g < self.order());
        (g / self.sat.positions(), g % self.sat.positions())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GroupSpec {
    Trivial,
    Hue(HueGroupSpec),
    Sat(SatGroupSpec),
    Product(ProductGroupSpec),
}

impl GroupSpec {
    pub fn hue(n: usize) -> Self {
        GroupSpec::Hue(HueGroupSpec::new(n))
    }

    pub fn sat(d: f64, positions: usize) -> Self {
        GroupSpec::Sat(SatGroupSpec::new(d, positions))
    }

    pub fn product(n: usize, d: f64, positions: usize) -> Self {
        GroupSpec::Product(ProductGroupSpec::new(HueGroupSpec::new(n), SatGroupSpec::new(d, positions)))
    }

    /// Group-axis length of lifted feature maps.
    pub fn order(&self) -> usize {
        match self {
            GroupSpec::Trivial => 1,
            GroupSpec::Hue(h) => h.order(),
            GroupSpec::Sat(s) => s.positions(),
            GroupSpec::Product(p) => p.order(),
        }
    }

    /// Group-axis support of filter banks; also the parameter-count factor a
    /// group-convolution layer pays over a planar layer of equal width.
    pub fn filter_slots(&self) -> usize {
        match self {
            GroupSpec::Trivial => 1,
            GroupSpec::Hue(h) => h.order(),
            GroupSpec::Sat(s) => s.offset_count(),
            GroupSpec::Product(p) => p.hue.order() * p.sat.offset_count(),
        }
    }

    /// (hue shift, saturation shift) applied by each lift slot, in slot order.
    pub fn lift_elements(&self) -> Vec<(f64, f64)> {
        match self {
            GroupSpec::Trivial => vec![(0.0, 0.0)],
            GroupSpec::Hue(h) => (0..h.order()).map(|j| (h.element_value(j), 0.0)).collect(),
            GroupSpec::Sat(s) => (0..s.positions())
                .map(|p| (0.0, s.element_value(s.position_shift(p))))
                .collect(),
            GroupSpec::Product(p) => {
                let mut out = Vec::with_capacity(p.order());
                for n_idx in 0..p.hue.order() {
                    for pos in 0..p.sat.positions() {
                        out.push((
                            p.hue.element_value(n_idx),
                            p.sat.element_value(p.sat.position_shift(pos)),
                        ));
                    }
                }
                out
            }
        }
    }

    /// Weight-sharing recipe turning a filter bank into the planar kernel of
    /// one group-convolution layer.
    ///
    /// Hue output slot r sums conv2d(f[s], w[(s - r) mod n]) over s.
    /// Saturation output slot j sums conv2d(f[j + i], w[i]) over the offsets
    /// i valid at j, rescaled by T / |valid| so boundary slots keep the
    /// activation scale of interior ones. The product group applies the
    /// cyclic rule on the hue factor and the truncated rule on the
    /// saturation factor.
    pub fn orbit_plan(&self) -> OrbitPlan {
        match self {
            GroupSpec::Trivial => OrbitPlan {
                slots_out: 1,
                slots_in: 1,
                entries: vec![OrbitEntry { slot_out: 0, slot_in: 0, filter_slot: 0, scale: 1.0 }],
            },
            GroupSpec::Hue(h) => {
                let n = h.order();
                let mut entries = Vec::with_capacity(n * n);
                for r in 0..n {
                    for s in 0..n {
                        entries.push(OrbitEntry {
                            slot_out: r,
                            slot_in: s,
                            filter_slot: (s + n - r) % n,
                            scale: 1.0,
                        });
                    }
                }
                OrbitPlan { slots_out: n, slots_in: n, entries }
            }
            GroupSpec::Sat(s) => sat_plan(s),
            GroupSpec::Product(p) => {
                let n = p.hue.order();
                let m = p.sat.positions();
                let t = p.sat.offset_count();
                let mut entries = Vec::new();
                for r_n in 0..n {
                    for s_n in 0..n {
                        let hue_filter = (s_n + n - r_n) % n;
                        let sub = sat_plan(&p.sat);
                        for e in sub.entries {
                            entries.push(OrbitEntry {
                                slot_out: r_n * m + e.slot_out,
                                slot_in: s_n * m + e.slot_in,
                                filter_slot: hue_filter * t + e.filter_slot,
                                scale: e.scale,
                            });
                        }
                    }
                }
                OrbitPlan { slots_out: n * m, slots_in: n * m, entries }
            }
        }
    }
}

fn sat_plan(s: &SatGroupSpec) -> OrbitPlan {
    let m = s.positions();
    let t = s.offset_count();
    let mut entries = Vec::new();
    for j in 0..m {
        let valid: Vec<isize> = s.offsets().filter(|&i| {
            let at = j as isize + i;
            at >= 0 && at < m as isize
        }).collect();
        let scale = t as f32 / valid.len() as f32;
        for &i in &valid {
            entries.push(OrbitEntry {
                slot_out: j,
                slot_in: (j as isize + i) as usize,
                filter_slot: (i + s.radius() as isize) as usize,
                scale,
            });
        }
    }
    OrbitPlan { slots_out: m, slots_in: m, entries }
}

fn slot_dims(n_slots: usize, f: &Tensor) -> (usize, usize, usize) {
    let sh = f.shape();
    assert_eq!(sh.len(), 4, "feature map must be 4-d [b, slots*c, h, w]");
    assert_eq!(
        sh[1] % n_slots,
        0,
        "channel axis {} not divisible by group order {}",
        sh[1],
        n_slots
    );
    (sh[0], sh[1] / n_slots, sh[2] * sh[3])
}

/// Hue action on a lifted feature map: output slot k holds input slot
/// (k + i) mod n. Exact (pure block permutation).
pub fn act_gmap_hue(n: usize, i: usize, f: &Tensor) -> Tensor {
    assert!(i < n);
    let (b, c, hw) = slot_dims(n, f);
    let block = c * hw;
    let fd = f.data();
    let mut out = vec![0.0f32; fd.len()];
    for bi in 0..b {
        for k in 0..n {
            let src = (bi * n + (k + i) % n) * block;
            let dst = (bi * n + k) * block;
            out[dst..dst + block].copy_from_slice(&fd[src..src + block]);
        }
    }
    Tensor::new(f.shape(), out)
}

/// Saturation action: output slot k holds input slot k + i where that index
/// exists, zero elsewhere (positive i zero-fills the tail, negative the head).
pub fn act_gmap_sat(m: usize, i: isize, f: &Tensor) -> Tensor {
    assert!(i.unsigned_abs() < m, "shift magnitude must be below position count");
    let (b, c, hw) = slot_dims(m, f);
    let block = c * hw;
    let fd = f.data();
    let mut out = vec![0.0f32; fd.len()];
    for bi in 0..b {
        for k in 0..m {
            let at = k as isize + i;
            if at >= 0 && at < m as isize {
                let src = (bi * m + at as usize) * block;
                let dst = (bi * m + k) * block;
                out[dst..dst + block].copy_from_slice(&fd[src..src + block]);
            }
        }
    }
    Tensor::new(f.shape(), out)
}

/// Product action: hue rotation of the outer slot axis composed with the
/// saturation shift of the inner one; equals act_gmap_hue after act_gmap_sat.
pub fn act_gmap_product(spec: &ProductGroupSpec, i: usize, j: isize, f: &Tensor) -> Tensor {
    let n = spec.hue.order();
    let m = spec.sat.positions();
    assert!(i < n && j.unsigned_abs() < m);
    let (b, c, hw) = slot_dims(n * m, f);
    let block = c * hw;
    let fd = f.data();
    let mut out = vec![0.0f32; fd.len()];
    for bi in 0..b {
        for a in 0..n {
            for k in 0..m {
                let at = k as isize + j;
                if at >= 0 && at < m as isize {
                    let src = (bi * n * m + ((a + i) % n) * m + at as usize) * block;
                    let dst = (bi * n * m + a * m + k) * block;
                    out[dst..dst + block].copy_from_slice(&fd[src..src + block]);
                }
            }
        }
    }
    Tensor::new(f.shape(), out)
}
