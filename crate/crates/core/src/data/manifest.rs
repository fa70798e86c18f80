use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{px_to_unit, Sample};
use crate::error::{Error, Result};
use crate::match_loss::{BBox, GroundTruth};
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "faenet-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// First line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    /// Class names; the class id of `classes[k]` is `k + 1`.
    pub classes: Vec<String>,
}

/// One object of a record, in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub class: String,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    #[serde(default)]
    pub difficult: bool,
}

/// One image line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectRecord>,
}

/// A validated record with normalized annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDescriptor {
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<GroundTruth>,
}

/// Pixel coordinate of a unit coordinate, snapped to 1/16 px whenever the
/// snapped value converts back exactly.
fn unit_to_px(v: f64, extent: f64) -> f64 {
    let px = v * extent;
    let snapped = (px * 16.0).round() / 16.0;
    if snapped / extent == v {
        snapped
    } else {
        px
    }
}

/// Writes `samples` as PGM/PPM files under `dir/images` plus `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, classes: &[String], samples: &[Sample]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        classes: classes.to_vec(),
    };
    let mut lines = vec![serde_json::to_string(&header).expect("header serializes")];
    for (i, s) in samples.iter().enumerate() {
        let ext = if s.image.shape()[0] == 3 { "ppm" } else { "pgm" };
        let rel = format!("images/{i:06}.{ext}");
        save_image(&dir.join(&rel), &s.image)?;
        let (w, h) = (s.width() as f64, s.height() as f64);
        let mut objects = Vec::with_capacity(s.annotations.len());
        for gt in &s.annotations {
            let class = classes
                .get(gt.class_id.wrapping_sub(1))
                .ok_or(Error::UnknownClass(gt.class_id))?
                .clone();
            objects.push(ObjectRecord {
                class,
                xmin: unit_to_px(gt.bbox.xmin, w),
                ymin: unit_to_px(gt.bbox.ymin, h),
                xmax: unit_to_px(gt.bbox.xmax, w),
                ymax: unit_to_px(gt.bbox.ymax, h),
                difficult: gt.difficult,
            });
        }
        let rec = Record { image: rel, width: s.width(), height: s.height(), objects };
        lines.push(serde_json::to_string(&rec).expect("record serializes"));
    }
    for l in lines {
        writeln!(out, "{l}").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parses and validates a manifest. Errors carry the 1-based line number.
pub fn load_annotations(path: &Path) -> Result<(Vec<String>, Vec<SampleDescriptor>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| Error::Manifest { path: path.to_path_buf(), line, msg };

    let mut header: Option<ManifestHeader> = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(h) = &header else {
            let h: ManifestHeader =
                serde_json::from_str(&line).map_err(|e| err(lineno, format!("bad header: {e}")))?;
            if h.format != MANIFEST_FORMAT || h.version != MANIFEST_VERSION {
                return Err(err(lineno, format!("unsupported format {} version {}", h.format, h.version)));
            }
            if h.classes.is_empty() {
                return Err(err(lineno, "header lists no classes".into()));
            }
            header = Some(h);
            continue;
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(lineno, format!("bad record: {e}")))?;
        let name = format!("record {} ({})", out.len(), rec.image);
        if rec.width == 0 || rec.height == 0 {
            return Err(err(lineno, format!("{name}: zero image size")));
        }
        let image_path = base.join(&rec.image);
        if !image_path.is_file() {
            return Err(err(lineno, format!("{name}: missing image file {}", image_path.display())));
        }
        let (w, h_px) = (rec.width as f64, rec.height as f64);
        let mut annotations = Vec::with_capacity(rec.objects.len());
        for (k, o) in rec.objects.iter().enumerate() {
            let class_id = h
                .classes
                .iter()
                .position(|c| *c == o.class)
                .ok_or_else(|| err(lineno, format!("{name}: object {k} has unknown class {:?}", o.class)))?
                + 1;
            if !(o.xmin < o.xmax) || !(o.ymin < o.ymax) {
                return Err(err(
                    lineno,
                    format!(
                        "{name}: object {k} is inverted or empty (xmin {}, ymin {}, xmax {}, ymax {})",
                        o.xmin, o.ymin, o.xmax, o.ymax
                    ),
                ));
            }
            if o.xmin < 0.0 || o.ymin < 0.0 || o.xmax > w || o.ymax > h_px {
                return Err(err(lineno, format!("{name}: object {k} lies outside the {}x{} image", rec.width, rec.height)));
            }
            let px = BBox { xmin: o.xmin, ymin: o.ymin, xmax: o.xmax, ymax: o.ymax };
            let gt = GroundTruth::new(class_id, px_to_unit(&px, w, h_px), o.difficult)
                .map_err(|e| err(lineno, format!("{name}: object {k}: {e}")))?;
            annotations.push(gt);
        }
        out.push(SampleDescriptor { image_path, width: rec.width, height: rec.height, annotations });
    }
    let header = header.ok_or_else(|| err(1, "empty manifest".into()))?;
    Ok((header.classes, out))
}

/// Loads a manifest together with its images.
pub fn load_dataset(path: &Path) -> Result<(Vec<String>, Vec<Sample>)> {
    let (classes, descs) = load_annotations(path)?;
    let samples = descs
        .into_iter()
        .map(|d| {
            let image = load_image(&d.image_path)?;
            if image.shape()[1] != d.height || image.shape()[2] != d.width {
                return Err(Error::Config(format!(
                    "{}: image is {}x{} but the manifest says {}x{}",
                    d.image_path.display(),
                    image.shape()[2],
                    image.shape()[1],
                    d.width,
                    d.height
                )));
            }
            Ok(Sample { image, annotations: d.annotations })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((classes, samples))
}

/// Reads a PGM/PPM (or any supported raster) as a `[C, H, W]` tensor in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    let mut data = vec![0.0; c * h * w];
    for (i, v) in raw.iter().enumerate() {
        let (pix, ch) = (i / c, i % c);
        data[ch * h * w + pix] = f64::from(*v) / 255.0;
    }
    Tensor::new(vec![c, h, w], data)
}

/// Writes a `[C, H, W]` tensor (C = 1 or 3) as 8-bit PGM/PPM; the format
/// follows the file extension.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape("save_image", format!("expected [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut raw = vec![0u8; c * h * w];
    for ch in 0..c {
        for pix in 0..h * w {
            raw[pix * c + ch] = q(image.data()[ch * h * w + pix]);
        }
    }
    let dynimg = if c == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
    };
    dynimg.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
