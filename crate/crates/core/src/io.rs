//! Text formats for annotations and detections, and PPM raster I/O.
//!
//! Annotations hold one object per line, `x1 y1 x2 y2 label`, with the label
//! a class name. Detections hold `class score x1 y1 x2 y2`, every number
//! printed with six decimals so identical runs give identical files. Blank
//! lines and lines starting with `#` are ignored in both.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageEncoder, ImageReader, RgbImage};

use crate::codec::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn class_index(names: &[String], label: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == label)
        .ok_or_else(|| Error::UnknownClass(label.to_string()))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_error(source: &str, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        detail: detail.into(),
    }
}

fn numbers<const N: usize>(fields: &[&str], source: &str, line: usize) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    for (slot, f) in out.iter_mut().zip(fields) {
        *slot = f
            .parse()
            .map_err(|_| parse_error(source, line, format!("`{f}` is not a number")))?;
    }
    Ok(out)
}

fn checked_box(b: BBox, source: &str, line: usize) -> Result<BBox> {
    BBox::new(b.x1, b.y1, b.x2, b.y2, b.class_id, b.score)
        .map_err(|e| parse_error(source, line, e.to_string()))
}

/// Parses annotation text; `source` names the input in error messages.
pub fn parse_annotations(text: &str, class_names: &[String], source: &str) -> Result<Vec<BBox>> {
    content_lines(text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(parse_error(
                    source,
                    line,
                    format!("expected `x1 y1 x2 y2 label`, found {} fields", fields.len()),
                ));
            }
            let [x1, y1, x2, y2] = numbers::<4>(&fields[..4], source, line)?;
            let class_id = class_index(class_names, fields[4])?;
            checked_box(BBox { x1, y1, x2, y2, class_id, score: 1.0 }, source, line)
        })
        .collect()
}

pub fn read_annotations(path: &Path, class_names: &[String]) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, class_names, &path.display().to_string())
}

pub fn format_annotations(boxes: &[BBox], class_names: &[String]) -> Result<String> {
    let mut out = String::new();
    for b in boxes {
        let name = class_names.get(b.class_id).ok_or(Error::ClassOutOfRange {
            class_id: b.class_id,
            num_classes: class_names.len(),
        })?;
        out.push_str(&format!("{:.6} {:.6} {:.6} {:.6} {name}\n", b.x1, b.y1, b.x2, b.y2));
    }
    Ok(out)
}

pub fn parse_detections(text: &str, class_names: &[String], source: &str) -> Result<Vec<BBox>> {
    content_lines(text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(parse_error(
                    source,
                    line,
                    format!("expected `class score x1 y1 x2 y2`, found {} fields", fields.len()),
                ));
            }
            let class_id = class_index(class_names, fields[0])?;
            let [score, x1, y1, x2, y2] = numbers::<5>(&fields[1..], source, line)?;
            checked_box(BBox { x1, y1, x2, y2, class_id, score }, source, line)
        })
        .collect()
}

pub fn read_detections(path: &Path, class_names: &[String]) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, class_names, &path.display().to_string())
}

pub fn format_detections(boxes: &[BBox], class_names: &[String]) -> Result<String> {
    let mut out = String::new();
    for b in boxes {
        let name = class_names.get(b.class_id).ok_or(Error::ClassOutOfRange {
            class_id: b.class_id,
            num_classes: class_names.len(),
        })?;
        out.push_str(&format!(
            "{name} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            b.score, b.x1, b.y1, b.x2, b.y2
        ));
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Reads any PNM raster as a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let image_err = |detail: String| Error::Image {
        path: path.to_path_buf(),
        detail,
    };
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Quantizes a `[3, H, W]` tensor (clamped to `[0, 1]`) to 8 bits per channel.
pub fn image_to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("image_to_rgb8", format!("expected 3 channels, got {c}")));
    }
    let mut buf = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for (p, &v) in image.channel(ch).iter().enumerate() {
            buf[p * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches extents"))
}

/// Writes a binary PPM.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let rgb = image_to_rgb8(image)?;
    let mut bytes = Vec::new();
    PnmEncoder::new(&mut bytes)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(rgb.as_raw(), rgb.width(), rgb.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    write_bytes(path, &bytes)
}

/// Draws one-pixel box outlines onto a `[3, H, W]` image, clipped to it.
pub fn draw_boxes(image: &mut Tensor, boxes: &[BBox], color: [f64; 3]) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("draw_boxes", format!("expected 3 channels, got {c}")));
    }
    let clamp = |v: f64, hi: usize| (v.floor().max(0.0) as usize).min(hi - 1);
    for b in boxes {
        if b.x2 <= 0.0 || b.y2 <= 0.0 || b.x1 >= w as f64 || b.y1 >= h as f64 {
            continue;
        }
        let (x1, x2) = (clamp(b.x1, w), clamp(b.x2 - 1e-9, w));
        let (y1, y2) = (clamp(b.y1, h), clamp(b.y2 - 1e-9, h));
        for (ch, &v) in color.iter().enumerate() {
            let plane = image.channel_mut(ch);
            for x in x1..=x2 {
                plane[y1 * w + x] = v;
                plane[y2 * w + x] = v;
            }
            for y in y1..=y2 {
                plane[y * w + x1] = v;
                plane[y * w + x2] = v;
            }
        }
    }
    Ok(())
}
