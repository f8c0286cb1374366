//! Wire formats: masks as 8-bit grayscale PNG (pixel value = class index),
//! images as 8-bit RGB PNG, both base64-encoded inside JSON bodies.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use lse_core::{Map3, SemanticMask};

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("invalid base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("invalid png: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encoding failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("expected {expected}, got {found}")]
    Format { expected: &'static str, found: String },
    #[error("mask is {found_w}x{found_h}, canvas is {w}x{h}")]
    Size { w: usize, h: usize, found_w: usize, found_h: usize },
    #[error("label {label} outside {classes} classes")]
    Label { label: u8, classes: usize },
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
    }
    Ok(out)
}

fn decode(bytes: &[u8], color: png::ColorType) -> Result<(usize, usize, Vec<u8>), WireError> {
    let reader = png::Decoder::new(Cursor::new(bytes)).read_info()?;
    let info = reader.info();
    if info.color_type != color || info.bit_depth != png::BitDepth::Eight {
        return Err(WireError::Format {
            expected: if color == png::ColorType::Grayscale {
                "8-bit grayscale png"
            } else {
                "8-bit rgb png"
            },
            found: format!("{:?} {:?}", info.color_type, info.bit_depth),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut reader = reader;
    let size = reader.output_buffer_size().unwrap_or(0);
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, buf))
}

pub fn mask_to_png(mask: &SemanticMask) -> Result<Vec<u8>, WireError> {
    encode(mask.width, mask.height, png::ColorType::Grayscale, &mask.labels)
}

/// Decodes a mask and checks it against the canvas and class count.
pub fn png_to_mask(bytes: &[u8], height: usize, width: usize, classes: usize) -> Result<SemanticMask, WireError> {
    let (w, h, labels) = decode(bytes, png::ColorType::Grayscale)?;
    if (w, h) != (width, height) {
        return Err(WireError::Size {
            w: width,
            h: height,
            found_w: w,
            found_h: h,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| usize::from(l) >= classes) {
        return Err(WireError::Label { label, classes });
    }
    Ok(SemanticMask {
        height,
        width,
        labels,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(3, h, w)` in `[0, 1]` to RGB PNG.
pub fn image_to_png(img: &Map3) -> Result<Vec<u8>, WireError> {
    let n = img.plane_len();
    let mut data = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            data.push(to_byte(img.data[c * n + p]));
        }
    }
    encode(img.width, img.height, png::ColorType::Rgb, &data)
}

pub fn png_to_image(bytes: &[u8], height: usize, width: usize) -> Result<Map3, WireError> {
    let (w, h, data) = decode(bytes, png::ColorType::Rgb)?;
    if (w, h) != (width, height) {
        return Err(WireError::Size {
            w: width,
            h: height,
            found_w: w,
            found_h: h,
        });
    }
    let n = w * h;
    let mut img = Map3::zeros(3, h, w);
    for p in 0..n {
        for c in 0..3 {
            img.data[c * n + p] = f64::from(data[3 * p + c]) / 255.0;
        }
    }
    Ok(img)
}

/// A binary region from a grayscale PNG: nonzero pixels are inside.
pub fn png_to_region(bytes: &[u8], height: usize, width: usize) -> Result<Vec<bool>, WireError> {
    let mask = png_to_mask(bytes, height, width, 256)?;
    Ok(mask.labels.iter().map(|&v| v != 0).collect())
}

pub fn b64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn unb64(text: &str) -> Result<Vec<u8>, WireError> {
    Ok(STANDARD.decode(text)?)
}
