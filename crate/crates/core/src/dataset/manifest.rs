//! On-disk dataset layout: a `manifest.txt` plus one PNG per face.
//!
//! ```text
//! rrde-manifest v1 split=<train|validation> groups=<G> faces=<F> counts=<c0>,...,<c5>
//! group_id,path,label,bbox_x,bbox_y,bbox_w,bbox_h,group_label
//! train_00000,images/train_00000_0.png,3,120,88,40,40,3
//! ...
//! ```
//!
//! Paths are relative to the manifest's directory. Faces of a group are
//! contiguous and keep their order.

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;

use super::{BBox, DatasetManifest, FaceSample, GroupSample, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
const HEADER_TAG: &str = "rrde-manifest v1";
const COLUMNS: &str = "group_id,path,label,bbox_x,bbox_y,bbox_w,bbox_h,group_label";

fn to_png(image: &Tensor) -> Result<RgbImage> {
    let (h, w) = (image.dim(1), image.dim(2));
    let d = image.data();
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            let v = d[ch * plane + p];
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::Format(format!("pixel value {v} is not representable as 8-bit")));
            }
            bytes.push(v as u8);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized to image"))
}

fn from_png(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = px[ch] as f64;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("non-empty image")
}

/// Writes `dir/manifest.txt` and `dir/images/*.png`. Pixel values must be integral.
pub fn write_manifest(manifest: &DatasetManifest, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let counts = manifest.per_class_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    let mut text = format!(
        "{HEADER_TAG} split={} groups={} faces={} counts={counts}\n{COLUMNS}\n",
        manifest.split,
        manifest.groups.len(),
        manifest.face_count()
    );
    for g in &manifest.groups {
        for (k, f) in g.faces.iter().enumerate() {
            let rel = format!("images/{}_{k}.png", g.group_id);
            let path = dir.join(&rel);
            to_png(&f.image)?.save(&path)?;
            let b = f.bbox;
            writeln!(text, "{},{rel},{},{},{},{},{},{}", g.group_id, f.label, b.x, b.y, b.w, b.h, g.group_label)
                .expect("string write");
        }
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn header_field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    header
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::Format(format!("manifest header lacks `{key}`")))
}

/// Reads a manifest file (or a directory containing `manifest.txt`) and its images.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(MANIFEST_FILE);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .filter(|h| h.starts_with(HEADER_TAG))
        .ok_or_else(|| Error::Format("missing manifest header".into()))?;
    let split: Split = header_field(header, "split")?.parse()?;
    let parse_usize = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("invalid {what} `{s}`")))
    };
    let n_groups = parse_usize(header_field(header, "groups")?, "group count")?;
    let n_faces = parse_usize(header_field(header, "faces")?, "face count")?;
    let counts: Vec<usize> =
        header_field(header, "counts")?.split(',').map(|c| parse_usize(c, "class count")).collect::<Result<_>>()?;
    if counts.len() != NUM_CLASSES {
        return Err(Error::Format(format!("expected {NUM_CLASSES} class counts")));
    }
    if lines.next() != Some(COLUMNS) {
        return Err(Error::Format("missing or unexpected column line".into()));
    }

    let mut groups: Vec<GroupSample> = Vec::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::Format(format!("line {}: expected 8 fields, found {}", lineno + 3, cols.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("line {}: invalid number `{s}`", lineno + 3)))
        };
        let group_id = cols[0];
        let label = parse_usize(cols[2], "label")?;
        let group_label = parse_usize(cols[7], "group label")?;
        let bbox = BBox { x: num(cols[3])?, y: num(cols[4])?, w: num(cols[5])?, h: num(cols[6])? };
        let img_path = base.join(cols[1]);
        let img = image::open(&img_path)?.to_rgb8();
        let face = FaceSample::new(from_png(&img), label, group_id, bbox)?;
        match groups.last_mut() {
            Some(g) if g.group_id == group_id => {
                if g.group_label != group_label {
                    return Err(Error::Format(format!("group `{group_id}` has inconsistent group labels")));
                }
                g.faces.push(face);
            }
            _ => groups.push(GroupSample::new(group_id, vec![face], group_label)?),
        }
    }
    let manifest = DatasetManifest::new(split, groups);
    if manifest.groups.len() != n_groups || manifest.face_count() != n_faces {
        return Err(Error::Format(format!(
            "header declares {n_groups} groups / {n_faces} faces, found {} / {}",
            manifest.groups.len(),
            manifest.face_count()
        )));
    }
    if manifest.per_class_counts[..] != counts[..] {
        return Err(Error::Format(format!(
            "header counts {counts:?} disagree with faces {:?}",
            manifest.per_class_counts
        )));
    }
    Ok(manifest)
}
