use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use super::{DetectionMask, Image, ImageError};

const PNG_SIGNATURE: [u8; 8] = [137, 80, 78, 71, 13, 10, 26, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

/// Loads an 8- or 16-bit PNG, scaling linearly into `[0, 1]`.
///
/// Gray stays single-channel; palette images expand to RGB and alpha is
/// dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let io_err = |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ImageError::NotFound(path.to_path_buf())),
        Err(e) => return Err(io_err(e)),
    };
    let mut sig = [0u8; 8];
    let n = read_up_to(&mut file, &mut sig).map_err(io_err)?;
    if n < 8 || sig != PNG_SIGNATURE {
        return Err(ImageError::Unsupported {
            path: path.to_path_buf(),
            reason: "not a PNG file".into(),
        });
    }
    let file = File::open(path).map_err(io_err)?;
    let corrupt = |e: png::DecodingError| ImageError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let size = reader.output_buffer_size().ok_or_else(|| ImageError::Unsupported {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    buf.truncate(info.buffer_size());

    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(ImageError::Unsupported {
                path: path.to_path_buf(),
                reason: "unexpanded palette image".into(),
            })
        }
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf.iter().map(|b| *b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        other => {
            return Err(ImageError::Unsupported {
                path: path.to_path_buf(),
                reason: format!("bit depth {other:?}"),
            })
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    if samples.len() != w * h * src_channels {
        return Err(ImageError::Corrupt {
            path: path.to_path_buf(),
            reason: "sample count does not match header".into(),
        });
    }
    let data = if src_channels == keep {
        samples
    } else {
        samples
            .chunks_exact(src_channels)
            .flat_map(|p| p[..keep].to_vec())
            .collect()
    };
    Image::new(w, h, keep, data)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Writes a PNG with rounding to the nearest representable level.
pub fn save_image(path: impl AsRef<Path>, image: &Image, depth: BitDepth) -> Result<(), ImageError> {
    let path = path.as_ref();
    let io_err = |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    encoder.set_color(if image.channels() == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    let bytes: Vec<u8> = match depth {
        BitDepth::Eight => {
            encoder.set_depth(png::BitDepth::Eight);
            image.data().iter().map(|v| (v * 255.0).round() as u8).collect()
        }
        BitDepth::Sixteen => {
            encoder.set_depth(png::BitDepth::Sixteen);
            image
                .data()
                .iter()
                .flat_map(|v| ((v * 65535.0).round() as u16).to_be_bytes())
                .collect()
        }
    };
    let enc_err = |e: png::EncodingError| ImageError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut writer = encoder.write_header().map_err(enc_err)?;
    writer.write_image_data(&bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

/// Single-channel 0/255 PNG of the mask labels.
pub fn save_mask_png(path: impl AsRef<Path>, mask: &DetectionMask) -> Result<(), ImageError> {
    save_image(path, &mask.to_image(), BitDepth::Eight)
}

/// Blob list as `[{centroid:[x,y], area, bbox:[x0,y0,x1,y1]}, ...]`.
pub fn write_blobs_json(path: impl AsRef<Path>, mask: &DetectionMask) -> Result<(), ImageError> {
    let path = path.as_ref();
    let json = serde_json::to_vec_pretty(mask.blobs()).map_err(|e| ImageError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    std::fs::write(path, json).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}
