//! 8-bit sRGB PNG at the file boundary, linear RGB in memory.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::RenderedImage;

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

pub fn encode_byte(linear: f64) -> u8 {
    (linear_to_srgb(linear.clamp(0.0, 1.0)) * 255.0).round() as u8
}

pub fn decode_byte(b: u8) -> f64 {
    srgb_to_linear(b as f64 / 255.0)
}

/// Rounds every value through the 8-bit sRGB encoding.
pub fn quantize(img: &RenderedImage) -> RenderedImage {
    let mut out = img.clone();
    out.pixels.iter_mut().for_each(|v| *v = decode_byte(encode_byte(*v)));
    out.alpha = None;
    out
}

pub fn encode_png(img: &RenderedImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let data: Vec<u8> = img.pixels.iter().map(|&v| encode_byte(v)).collect();
        let mut w = enc
            .write_header()
            .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
        w.write_image_data(&data)
            .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
    }
    Ok(bytes)
}

pub fn save_png(img: &RenderedImage, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads an 8-bit RGB or RGBA PNG as linear RGB. Alpha is dropped.
pub fn load_png(path: &Path) -> Result<RenderedImage> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let malformed = |msg: String| Error::Malformed {
        path: path.to_path_buf(),
        msg,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| malformed(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| malformed("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| malformed(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(malformed(format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut img = RenderedImage::filled(w, h, [0.0; 3]);
    for p in 0..w * h {
        let px = &buf[p * channels..(p + 1) * channels];
        for c in 0..3 {
            let b = if channels < 3 { px[0] } else { px[c] };
            img.pixels[p * 3 + c] = decode_byte(b);
        }
    }
    Ok(img)
}
