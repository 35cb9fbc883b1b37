//! Dataset ingestion and colorization.
//!
//! Grayscale IDX digit archives (raw or gzip) are colorized into HSL
//! examples: every pixel of an image gets one hue drawn uniformly from a
//! subset's hue range, full saturation, and the gray value as lightness.
//! Subset A draws hues from [0, 240) degrees, subset B from [240, 360), so
//! train-on-A / eval-on-B measures transfer to unseen hues.
//!
//! Colorized splits are stored in a little-endian binary format ("HSL1"):
//! magic, count, height, width, then per record three f32 planes (h, s, l)
//! and a u8 label. A text manifest with a SHA-256 of the binary sits next to
//! each split. Generation is deterministic per (seed, example index), so a
//! split file regenerates byte-identically.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::colorspace::{hsl_to_rgb, tile_grid, HslImage};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: u32 = 0x4853_4c31; // "HSL1"

pub const SUBSET_A_DEG: (f64, f64) = (0.0, 240.0);
pub const SUBSET_B_DEG: (f64, f64) = (240.0, 360.0);

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct LabeledHsl {
    pub image: HslImage,
    pub label: u8,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Load an IDX image/label archive pair (big-endian, magic 0x803 / 0x801).
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Vec<GrayImage>, Vec<u8>)> {
    let ibytes = read_maybe_gz(images)?;
    let lbytes = read_maybe_gz(labels)?;
    if ibytes.len() < 16 || BigEndian::read_u32(&ibytes[0..4]) != 0x0000_0803 {
        return Err(Error::format(format!("{}: not an IDX image archive", images.display())));
    }
    if lbytes.len() < 8 || BigEndian::read_u32(&lbytes[0..4]) != 0x0000_0801 {
        return Err(Error::format(format!("{}: not an IDX label archive", labels.display())));
    }
    let count = BigEndian::read_u32(&ibytes[4..8]) as usize;
    let h = BigEndian::read_u32(&ibytes[8..12]) as usize;
    let w = BigEndian::read_u32(&ibytes[12..16]) as usize;
    let lcount = BigEndian::read_u32(&lbytes[4..8]) as usize;
    if lcount != count {
        return Err(Error::format(format!("image/label count mismatch: {} vs {}", count, lcount)));
    }
    if ibytes.len() != 16 + count * h * w || lbytes.len() != 8 + count {
        return Err(Error::format("IDX payload truncated"));
    }
    let mut imgs = Vec::with_capacity(count);
    for i in 0..count {
        let at = 16 + i * h * w;
        imgs.push(GrayImage { height: h, width: w, pixels: ibytes[at..at + h * w].to_vec() });
    }
    Ok((imgs, lbytes[8..].to_vec()))
}

/// Paint a grayscale digit with a single hue (degrees): constant hue plane,
/// full saturation, lightness = gray / 2. Values are snapped to f32 so the
/// in-memory example matches its stored form exactly.
pub fn colorize(gray: &GrayImage, hue_deg: f64) -> HslImage {
    let hue = ((hue_deg / 360.0 * 255.0) as f32) as f64;
    let n = gray.pixels.len();
    HslImage {
        height: gray.height,
        width: gray.width,
        h: vec![hue; n],
        s: vec![255.0; n],
        l: gray.pixels.iter().map(|&p| ((p as f32) / 2.0) as f64).collect(),
    }
}

/// Per-example hue draw: stream `index` of a ChaCha8 generator seeded with
/// `seed`, one uniform sample in [lo, hi) degrees. Independent of batch
/// order and of which other examples are generated.
pub fn example_hue(seed: u64, index: u64, lo_deg: f64, hi_deg: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.gen_range(lo_deg..hi_deg)
}

pub fn make_split(
    source: &[(GrayImage, u8)],
    lo_deg: f64,
    hi_deg: f64,
    seed: u64,
) -> Vec<LabeledHsl> {
    source
        .iter()
        .enumerate()
        .map(|(i, (gray, label))| LabeledHsl {
            image: colorize(gray, example_hue(seed, i as u64, lo_deg, hi_deg)),
            label: *label,
        })
        .collect()
}

pub fn write_dataset(path: &Path, examples: &[LabeledHsl]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::invalid("refusing to write an empty dataset"));
    }
    let h = examples[0].image.height;
    let w = examples[0].image.width;
    let mut buf: Vec<u8> = Vec::with_capacity(8 + examples.len() * (12 * h * w + 1));
    buf.write_u32::<LittleEndian>(DATASET_MAGIC)?;
    buf.write_u32::<LittleEndian>(examples.len() as u32)?;
    buf.write_u16::<LittleEndian>(h as u16)?;
    buf.write_u16::<LittleEndian>(w as u16)?;
    for ex in examples {
        if ex.image.height != h || ex.image.width != w {
            return Err(Error::invalid("dataset images must share dimensions"));
        }
        for plane in [&ex.image.h, &ex.image.s, &ex.image.l] {
            for &v in plane.iter() {
                buf.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        buf.push(ex.label);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledHsl>> {
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];
    let magic = r.read_u32::<LittleEndian>()?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(format!("{}: bad dataset magic {:#x}", path.display(), magic)));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u16::<LittleEndian>()? as usize;
    let w = r.read_u16::<LittleEndian>()? as usize;
    let record = 12 * h * w + 1;
    if r.len() != count * record {
        return Err(Error::format(format!(
            "{}: expected {} records of {} bytes, have {} bytes",
            path.display(),
            count,
            record,
            r.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let plane = |r: &mut &[u8]| -> Result<Vec<f64>> {
            let mut p = Vec::with_capacity(h * w);
            for _ in 0..h * w {
                p.push(r.read_f32::<LittleEndian>()? as f64);
            }
            Ok(p)
        };
        let hp = plane(&mut r)?;
        let sp = plane(&mut r)?;
        let lp = plane(&mut r)?;
        let label = r.read_u8()?;
        out.push(LabeledHsl { image: HslImage { height: h, width: w, h: hp, s: sp, l: lp }, label });
    }
    Ok(out)
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{:02x}", b)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub hue_lo_deg: f64,
    pub hue_hi_deg: f64,
    pub seed: u64,
    pub path: String,
    pub sha256: String,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        format!(
            "split={}\ncount={}\nheight={}\nwidth={}\nhue_lo_deg={}\nhue_hi_deg={}\nseed={}\npath={}\nsha256={}\n",
            self.split,
            self.count,
            self.height,
            self.width,
            self.hue_lo_deg,
            self.hue_hi_deg,
            self.seed,
            self.path,
            self.sha256
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::models::parse_kv(text)?;
        let get = |k: &str| {
            crate::models::kv_get(&kv, k)
                .ok_or_else(|| Error::format(format!("manifest missing key {}", k)))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::format(format!("manifest bad number for {}", k)))
        };
        Ok(DatasetManifest {
            split: get("split")?.to_string(),
            count: num("count")? as usize,
            height: num("height")? as usize,
            width: num("width")? as usize,
            hue_lo_deg: num("hue_lo_deg")?,
            hue_hi_deg: num("hue_hi_deg")?,
            seed: num("seed")? as u64,
            path: get("path")?.to_string(),
            sha256: get("sha256")?.to_string(),
        })
    }
}

/// Write a split plus its manifest sidecar (`<path>.manifest`).
pub fn write_split_with_manifest(
    path: &Path,
    split: &str,
    examples: &[LabeledHsl],
    lo_deg: f64,
    hi_deg: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    write_dataset(path, examples)?;
    let manifest = DatasetManifest {
        split: split.to_string(),
        count: examples.len(),
        height: examples[0].image.height,
        width: examples[0].image.width,
        hue_lo_deg: lo_deg,
        hue_hi_deg: hi_deg,
        seed,
        path: path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string()),
        sha256: sha256_hex(path)?,
    };
    fs::write(manifest_path(path), manifest.to_text())?;
    Ok(manifest)
}

pub fn manifest_path(dataset: &Path) -> std::path::PathBuf {
    let mut os = dataset.as_os_str().to_owned();
    os.push(".manifest");
    std::path::PathBuf::from(os)
}

/// PPM preview grid of the first `count` examples.
pub fn sample_grid_ppm(examples: &[LabeledHsl], count: usize, cols: usize) -> Vec<u8> {
    let imgs: Vec<_> = examples.iter().take(count).map(|e| hsl_to_rgb(&e.image)).collect();
    tile_grid(&imgs, cols).to_ppm()
}

/// Synthetic sorting fixture: one digit painted at the n grid hues plus
/// `extra` uniformly random distractor hues, shuffled. Returns examples with
/// ground-truth hue shifts in grid units (fractional for distractors).
pub fn hue_orbit_fixture(
    gray: &GrayImage,
    label: u8,
    n: usize,
    extra: usize,
    seed: u64,
) -> Vec<(LabeledHsl, f64)> {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<(LabeledHsl, f64)> = Vec::with_capacity(n + extra);
    for j in 0..n {
        let deg = j as f64 * 360.0 / n as f64;
        items.push((LabeledHsl { image: colorize(gray, deg), label }, j as f64));
    }
    for _ in 0..extra {
        let deg = rng.gen_range(0.0..360.0);
        items.push((LabeledHsl { image: colorize(gray, deg), label }, deg / 360.0 * n as f64));
    }
    // Fisher-Yates with the same generator, so the fixture is one seed away
    // from reproducible.
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
    items
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("chromaconv-data-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn gray4() -> GrayImage {
        GrayImage { height: 2, width: 2, pixels: vec![0, 64, 128, 255] }
    }

    #[test]
    fn colorize_maps_gray_to_lightness_half() {
        let img = colorize(&gray4(), 120.0);
        assert_eq!(img.l, vec![0.0, 32.0, 64.0, 127.5]);
        assert!(img.s.iter().all(|&s| s == 255.0));
        let expected = ((120.0f64 / 360.0 * 255.0) as f32) as f64;
        assert!(img.h.iter().all(|&h| h == expected));
        img.validate().unwrap();
    }

    #[test]
    fn example_hue_is_order_independent() {
        let a = example_hue(9, 3, 0.0, 240.0);
        let b = example_hue(9, 3, 0.0, 240.0);
        assert_eq!(a, b);
        assert!(a >= 0.0 && a < 240.0);
        assert_ne!(example_hue(9, 4, 0.0, 240.0), a);
        assert_ne!(example_hue(10, 3, 0.0, 240.0), a);
    }

    #[test]
    fn dataset_round_trips_bitwise() {
        let grays = vec![(gray4(), 7u8), (GrayImage { height: 2, width: 2, pixels: vec![9; 4] }, 2u8)];
        let split = make_split(&grays, 0.0, 240.0, 11);
        let path = tmp("roundtrip.hsl1");
        write_dataset(&path, &split).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), split.len());
        for (a, b) in split.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.image.h, b.image.h);
            assert_eq!(a.image.s, b.image.s);
            assert_eq!(a.image.l, b.image.l);
        }
        // regeneration is byte-identical
        let bytes1 = fs::read(&path).unwrap();
        write_dataset(&path, &make_split(&grays, 0.0, 240.0, 11)).unwrap();
        assert_eq!(bytes1, fs::read(&path).unwrap());
    }

    #[test]
    fn manifest_round_trips_and_hashes() {
        let grays = vec![(gray4(), 1u8)];
        let split = make_split(&grays, 240.0, 360.0, 3);
        let path = tmp("manifested.hsl1");
        let m = write_split_with_manifest(&path, "test", &split, 240.0, 360.0, 3).unwrap();
        assert_eq!(m.sha256.len(), 64);
        assert_eq!(m.sha256, sha256_hex(&path).unwrap());
        let text = fs::read_to_string(manifest_path(&path)).unwrap();
        assert_eq!(DatasetManifest::from_text(&text).unwrap(), m);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = tmp("garbage.hsl1");
        fs::write(&path, [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]).unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn subset_hues_stay_in_range() {
        let grays: Vec<_> = (0..50).map(|i| (gray4(), (i % 10) as u8)).collect();
        for (lo, hi) in [SUBSET_A_DEG, SUBSET_B_DEG] {
            let split = make_split(&grays, lo, hi, 21);
            for ex in &split {
                let deg = ex.image.h[0] / 255.0 * 360.0;
                assert!(deg >= lo - 1e-9 && deg < hi, "hue {} outside [{}, {})", deg, lo, hi);
            }
        }
    }

    #[test]
    fn orbit_fixture_contains_grid_hues() {
        let items = hue_orbit_fixture(&gray4(), 5, 4, 6, 17);
        assert_eq!(items.len(), 10);
        let mut grid: Vec<f64> = items
            .iter()
            .map(|(_, t)| *t)
            .filter(|t| (t - t.round()).abs() < 1e-12)
            .collect();
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(grid, vec![0.0, 1.0, 2.0, 3.0]);
        // same seed, same scramble
        let again = hue_orbit_fixture(&gray4(), 5, 4, 6, 17);
        for (x, y) in items.iter().zip(&again) {
            assert_eq!(x.1, y.1);
            assert_eq!(x.0.image.h, y.0.image.h);
        }
    }

    #[test]
    fn sample_grid_is_valid_ppm() {
        let grays = vec![(gray4(), 0u8); 5];
        let split = make_split(&grays, 0.0, 240.0, 1);
        let ppm = sample_grid_ppm(&split, 5, 3);
        assert!(ppm.starts_with(b"P6\n"));
    }
}
