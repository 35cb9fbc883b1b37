//! HSL color geometry and the input-space group actions.
//!
//! Images store one f64 plane per channel. Hue lives in [0, 255) and is
//! cyclic with modulus 255; saturation and luminance live in [0, 255].
//! All color math runs in double precision so the group-action axioms hold
//! to 1e-9 on arbitrary real-valued pixels.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HslImage {
    pub height: usize,
    pub width: usize,
    /// Hue plane, cyclic in [0, 255).
    pub h: Vec<f64>,
    /// Saturation plane in [0, 255].
    pub s: Vec<f64>,
    /// Luminance plane in [0, 255].
    pub l: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, r: Vec<f64>, g: Vec<f64>, b: Vec<f64>) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let n = height * width;
        assert!(r.len() == n && g.len() == n && b.len() == n, "plane length mismatch");
        RgbImage { height, width, r, g, b }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Binary PPM (P6, 8-bit), channels quantized round-to-nearest.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
        for i in 0..self.pixels() {
            out.push(q(self.r[i]));
            out.push(q(self.g[i]));
            out.push(q(self.b[i]));
        }
        out
    }
}

impl HslImage {
    pub fn new(height: usize, width: usize, h: Vec<f64>, s: Vec<f64>, l: Vec<f64>) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let n = height * width;
        assert!(h.len() == n && s.len() == n && l.len() == n, "plane length mismatch");
        HslImage { height, width, h, s, l }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Range check for data loaded from external sources.
    pub fn validate(&self) -> Result<()> {
        for &v in &self.h {
            if !(0.0..255.0).contains(&v) {
                return Err(Error::invalid(format!("hue value {} outside [0,255)", v)));
            }
        }
        for v in self.s.iter().chain(&self.l) {
            if !(0.0..=255.0).contains(v) {
                return Err(Error::invalid(format!("channel value {} outside [0,255]", v)));
            }
        }
        Ok(())
    }
}

/// Standard RGB -> HSL with channels normalized to [0,1], stored back on the
/// 255 scale. Achromatic pixels take hue 0 by convention.
pub fn rgb_to_hsl(img: &RgbImage) -> HslImage {
    let n = img.pixels();
    let mut h = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut l = vec![0.0; n];
    for i in 0..n {
        let (r, g, b) = (img.r[i] / 255.0, img.g[i] / 255.0, img.b[i] / 255.0);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let lum = (max + min) / 2.0;
        l[i] = lum * 255.0;
        if max > min {
            let c = max - min;
            s[i] = c / (1.0 - (2.0 * lum - 1.0).abs()) * 255.0;
            let hue_deg = 60.0
                * if max == r {
                    ((g - b) / c).rem_euclid(6.0)
                } else if max == g {
                    (b - r) / c + 2.0
                } else {
                    (r - g) / c + 4.0
                };
            h[i] = hue_deg / 360.0 * 255.0;
        }
    }
    HslImage::new(img.height, img.width, h, s, l)
}

/// Exact inverse of `rgb_to_hsl` up to round-off; used for image export.
pub fn hsl_to_rgb(img: &HslImage) -> RgbImage {
    let n = img.pixels();
    let mut r = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        let sector = img.h[i] / 255.0 * 6.0; // in [0, 6)
        let s = img.s[i] / 255.0;
        let lum = img.l[i] / 255.0;
        let c = (1.0 - (2.0 * lum - 1.0).abs()) * s;
        let x = c * (1.0 - (sector % 2.0 - 1.0).abs());
        let (r1, g1, b1) = match sector as usize {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = lum - c / 2.0;
        r[i] = (r1 + m) * 255.0;
        g[i] = (g1 + m) * 255.0;
        b[i] = (b1 + m) * 255.0;
    }
    RgbImage::new(img.height, img.width, r, g, b)
}

/// Hue action: shift the hue plane by `h_i` modulo 255. Saturation and
/// luminance pass through bitwise.
pub fn act_hue(h_i: f64, img: &HslImage) -> HslImage {
    let h = img.h.iter().map(|&v| (v + h_i).rem_euclid(255.0)).collect();
    HslImage::new(img.height, img.width, h, img.s.clone(), img.l.clone())
}

/// Saturation action: shift the saturation plane by `s_i`, clamped to
/// [0, 255] at both ends. Hue and luminance pass through bitwise.
pub fn act_sat(s_i: f64, img: &HslImage) -> HslImage {
    let s = img.s.iter().map(|&v| (v + s_i).clamp(0.0, 255.0)).collect();
    HslImage::new(img.height, img.width, img.h.clone(), s, img.l.clone())
}

/// Combined action: saturation shift then hue shift. The two commute since
/// they touch disjoint planes.
pub fn act_hue_sat(h_i: f64, s_j: f64, img: &HslImage) -> HslImage {
    act_hue(h_i, &act_sat(s_j, img))
}

/// Tile images of equal size into a grid with `cols` columns, black filler.
pub fn tile_grid(images: &[RgbImage], cols: usize) -> RgbImage {
    assert!(!images.is_empty() && cols > 0);
    let (ih, iw) = (images[0].height, images[0].width);
    assert!(images.iter().all(|m| m.height == ih && m.width == iw), "tiles must share dims");
    let rows = images.len().div_ceil(cols);
    let (height, width) = (rows * ih, cols * iw);
    let mut out = RgbImage::new(height, width, vec![0.0; height * width], vec![0.0; height * width], vec![0.0; height * width]);
    for (idx, img) in images.iter().enumerate() {
        let (ty, tx) = (idx / cols, idx % cols);
        for y in 0..ih {
            for x in 0..iw {
                let dst = (ty * ih + y) * width + tx * iw + x;
                let src = y * iw + x;
                out.r[dst] = img.r[src];
                out.g[dst] = img.g[src];
                out.b[dst] = img.b[src];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_pixel_rgb(r: f64, g: f64, b: f64) -> RgbImage {
        RgbImage::new(1, 1, vec![r], vec![g], vec![b])
    }

    fn random_hsl(rng: &mut ChaCha8Rng, hw: usize) -> HslImage {
        let h = (0..hw * hw).map(|_| rng.gen_range(0.0..255.0)).collect();
        let s = (0..hw * hw).map(|_| rng.gen_range(0.0..=255.0)).collect();
        let l = (0..hw * hw).map(|_| rng.gen_range(0.0..=255.0)).collect();
        HslImage::new(hw, hw, h, s, l)
    }

    #[test]
    fn pure_red_converts() {
        let hsl = rgb_to_hsl(&one_pixel_rgb(255.0, 0.0, 0.0));
        assert_eq!(hsl.h[0], 0.0);
        assert_eq!(hsl.s[0], 255.0);
        assert_eq!(hsl.l[0], 127.5);
    }

    #[test]
    fn gray_is_achromatic() {
        let hsl = rgb_to_hsl(&one_pixel_rgb(128.0, 128.0, 128.0));
        assert_eq!(hsl.h[0], 0.0);
        assert_eq!(hsl.s[0], 0.0);
        assert_eq!(hsl.l[0], 128.0);
    }

    #[test]
    fn pure_green_hue_is_85() {
        let hsl = rgb_to_hsl(&one_pixel_rgb(0.0, 255.0, 0.0));
        assert!((hsl.h[0] - 85.0).abs() < 1e-12);
        assert_eq!(hsl.s[0], 255.0);
    }

    #[test]
    fn red_inverts() {
        let rgb = hsl_to_rgb(&HslImage::new(1, 1, vec![0.0], vec![255.0], vec![127.5]));
        assert!((rgb.r[0] - 255.0).abs() < 1e-9);
        assert!(rgb.g[0].abs() < 1e-9);
        assert!(rgb.b[0].abs() < 1e-9);
    }

    #[test]
    fn zero_saturation_is_gray_for_any_hue() {
        for hue in [0.0, 63.2, 170.0, 254.9] {
            let rgb = hsl_to_rgb(&HslImage::new(1, 1, vec![hue], vec![0.0], vec![128.0]));
            assert!((rgb.r[0] - 128.0).abs() < 1e-9);
            assert!((rgb.g[0] - 128.0).abs() < 1e-9);
            assert!((rgb.b[0] - 128.0).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip_is_tight_on_random_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let img = one_pixel_rgb(
                rng.gen_range(0.0..=255.0),
                rng.gen_range(0.0..=255.0),
                rng.gen_range(0.0..=255.0),
            );
            let back = hsl_to_rgb(&rgb_to_hsl(&img));
            for (a, b) in [(img.r[0], back.r[0]), (img.g[0], back.g[0]), (img.b[0], back.b[0])] {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 0.5, "round trip error {}", worst);
    }

    #[test]
    fn hue_shift_wraps_at_255() {
        let img = HslImage::new(1, 1, vec![100.0], vec![10.0], vec![20.0]);
        let shifted = act_hue(200.0, &img);
        assert!((shifted.h[0] - 45.0).abs() < 1e-12);
        assert_eq!(shifted.s, img.s);
        assert_eq!(shifted.l, img.l);
    }

    #[test]
    fn hue_identity_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_hsl(&mut rng, 4);
        assert_eq!(act_hue(0.0, &img), img);
    }

    #[test]
    fn sat_shift_clamps_both_ends() {
        let img = HslImage::new(1, 2, vec![1.0, 2.0], vec![200.0, 50.0], vec![9.0, 9.0]);
        let up = act_sat(100.0, &img);
        assert_eq!(up.s[0], 255.0);
        let down = act_sat(-80.0, &img);
        assert_eq!(down.s[1], 0.0);
        assert_eq!(up.h, img.h);
        assert_eq!(down.l, img.l);
    }

    #[test]
    fn sat_identity_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_hsl(&mut rng, 4);
        assert_eq!(act_sat(0.0, &img), img);
    }

    #[test]
    fn combined_action_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_hsl(&mut rng, 6);
        let combined = act_hue_sat(85.0, 25.5, &img);
        let sequential = act_hue(85.0, &act_sat(25.5, &img));
        assert_eq!(combined, sequential);
    }

    #[test]
    fn hue_and_sat_actions_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let img = random_hsl(&mut rng, 3);
            let hi = rng.gen_range(0.0..255.0);
            let sj = rng.gen_range(-255.0..255.0);
            let a = act_hue(hi, &act_sat(sj, &img));
            let b = act_sat(sj, &act_hue(hi, &img));
            for (x, y) in a.h.iter().zip(&b.h) {
                assert!((x - y).abs() < 1e-9);
            }
            for (x, y) in a.s.iter().zip(&b.s) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
