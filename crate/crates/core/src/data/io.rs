//! Image, disparity and manifest files.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{depth_to_disparity, Calibration, StereoSample};
use crate::error::{Error, Result};

/// Calibration given inline or as a path to a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CalibrationRef {
    Inline(Calibration),
    Path(String),
}

/// One manifest line. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub left: String,
    pub right: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disparity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib: Option<CalibrationRef>,
    /// Optional validity mask image; nonzero means valid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

/// RGB image as planar `[3, H, W]` in [0, 1]; 16-bit files keep their precision.
pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb32f();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| raw[(y * w + x) * 3 + c] as f64))
}

/// Writes a planar `[3, H, W]` image as 16-bit RGB PNG.
pub fn write_rgb_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(image_err(path))
}

/// Grayscale 8-bit PNG of `map` linearly scaled from `[lo, hi]`.
pub fn write_disparity_png(path: &Path, map: &Array2<f64>, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = map.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]];
        let v = if v.is_finite() { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        Luma([(v * 255.0).round() as u8])
    });
    buf.save(path).map_err(image_err(path))
}

/// Single-channel PFM (little- or big-endian). Rows are stored bottom-up.
pub fn read_pfm(path: &Path) -> Result<Array2<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if reader.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated PFM header"));
        }
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("not a PFM file")),
    };
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let mut bytes = vec![0u8; w * h * channels * 4];
    reader.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
    let value = |i: usize| {
        let b: [u8; 4] = bytes[i * 4..i * 4 + 4].try_into().expect("four bytes");
        (if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
    };
    Ok(Array2::from_shape_fn((h, w), |(y, x)| value(((h - 1 - y) * w + x) * channels)))
}

/// Writes a single-channel little-endian PFM.
pub fn write_pfm(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(map[[y, x]] as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// 16-bit grayscale PNG scaled by 1/256.
pub fn read_png16(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(image_err(path))?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] as f64 / 256.0))
}

/// Stores `value * 256` in a 16-bit PNG; invalid pixels become 0.
pub fn write_png16(path: &Path, map: &Array2<f64>, valid: Option<&Array2<bool>>) -> Result<()> {
    let (h, w) = map.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let ok = valid.is_none_or(|m| m[[y, x]]);
        let v = map[[y, x]];
        Luma([if ok && v.is_finite() { (v * 256.0).round().clamp(0.0, 65535.0) as u16 } else { 0 }])
    });
    buf.save(path).map_err(image_err(path))
}

fn is_pfm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
}

/// Disparity with its validity mask: PFM marks non-finite or negative values invalid,
/// 16-bit PNG marks zeros invalid.
pub fn read_disparity(path: &Path) -> Result<(Array2<f64>, Array2<bool>)> {
    if is_pfm(path) {
        let d = read_pfm(path)?;
        let valid = d.mapv(|v| v.is_finite() && v >= 0.0);
        Ok((d.mapv(|v| if v.is_finite() && v >= 0.0 { v } else { 0.0 }), valid))
    } else {
        let d = read_png16(path)?;
        let valid = d.mapv(|v| v > 0.0);
        Ok((d, valid))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

fn load_entry(base: &Path, index: usize, entry: &ManifestEntry) -> Result<StereoSample> {
    let resolve = |p: &str| base.join(p);
    let left = read_image(&resolve(&entry.left))?;
    let right = read_image(&resolve(&entry.right))?;
    let id = entry.id.clone().unwrap_or_else(|| format!("{index:05}"));
    if left.shape() != right.shape() {
        return Err(Error::Data(format!("{id}: left {:?} and right {:?} differ", left.shape(), right.shape())));
    }
    let calibration = match &entry.calib {
        Some(CalibrationRef::Inline(c)) => Some(*c),
        Some(CalibrationRef::Path(p)) => Some(read_json::<Calibration>(&resolve(p))?),
        None => None,
    };
    let gt = match (&entry.disparity, &entry.depth) {
        (Some(p), _) => Some(read_disparity(&resolve(p))?),
        (None, Some(p)) => {
            let path = resolve(p);
            let depth = if is_pfm(&path) { read_pfm(&path)? } else { read_png16(&path)? };
            Some(depth_to_disparity(depth.view(), calibration.as_ref())?)
        }
        (None, None) => None,
    };
    let (gt_disparity, mut valid_mask) = match gt {
        Some((d, m)) => (Some(d), Some(m)),
        None => (None, None),
    };
    if let (Some(p), Some(valid)) = (&entry.mask, valid_mask.as_mut()) {
        let path = resolve(p);
        let mask = image::open(&path).map_err(image_err(&path))?.into_luma8();
        if (mask.height() as usize, mask.width() as usize) != valid.dim() {
            return Err(Error::Data(format!("{id}: mask size differs from GT")));
        }
        for ((y, x), v) in valid.indexed_iter_mut() {
            *v = *v && mask.get_pixel(x as u32, y as u32)[0] > 0;
        }
    }
    let sample = StereoSample { id, left, right, gt_disparity, valid_mask, calibration };
    sample.validate()?;
    Ok(sample)
}

/// Reads every manifest entry. GT at or beyond `s_max` is marked invalid when given.
pub fn load_dataset(manifest: &Path, s_max: Option<usize>) -> Result<Vec<StereoSample>> {
    let entries: Vec<ManifestEntry> = read_json(manifest)?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut s = load_entry(&base, i, e)?;
            if let Some(s_max) = s_max {
                s.restrict_range(s_max);
            }
            Ok(s)
        })
        .collect()
}

/// Writes samples as 16-bit PNG images, PFM disparity and PNG masks plus `manifest.json`.
pub fn save_dataset(dir: &Path, samples: &[StereoSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let name = |suffix: &str| format!("{}_{suffix}", s.id);
        write_rgb_png(&dir.join(name("left.png")), &s.left)?;
        write_rgb_png(&dir.join(name("right.png")), &s.right)?;
        let mut entry = ManifestEntry {
            id: Some(s.id.clone()),
            left: name("left.png"),
            right: name("right.png"),
            disparity: None,
            depth: None,
            calib: s.calibration.map(CalibrationRef::Inline),
            mask: None,
        };
        if let (Some(gt), Some(mask)) = (&s.gt_disparity, &s.valid_mask) {
            write_pfm(&dir.join(name("disp.pfm")), gt)?;
            let path = dir.join(name("mask.png"));
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(gt.dim().1 as u32, gt.dim().0 as u32, |x, y| {
                Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
            });
            buf.save(&path).map_err(image_err(&path))?;
            entry.disparity = Some(name("disp.pfm"));
            entry.mask = Some(name("mask.png"));
        }
        entries.push(entry);
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
