//! Minimal grayscale PNG encode/decode used for dataset files and the wire format.

use crate::error::{Error, Result};
use crate::grid::ImageSlice;

/// Encode an 8-bit single-channel image.
pub fn encode_gray8(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    assert_eq!(pixels.len(), width * height);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Codec(e.to_string()))?;
        writer
            .write_image_data(pixels)
            .map_err(|e| Error::Codec(e.to_string()))?;
    }
    Ok(out)
}

/// Decoded grayscale raster; 16-bit inputs keep their full range.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub pixels: Vec<u16>,
}

impl GrayImage {
    /// Pixels as `u8`, failing if any value does not fit.
    pub fn to_u8(&self) -> Result<Vec<u8>> {
        self.pixels
            .iter()
            .map(|&v| u8::try_from(v).map_err(|_| Error::Codec(format!("value {v} exceeds 8 bits"))))
            .collect()
    }
}

/// Decode a PNG into grayscale. Color inputs are reduced to their mean channel.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::Codec(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Codec(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let bytes_per_sample = if wide { 2 } else { 1 };
    let color = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        _ => 3,
    };
    let row_len = info.line_size;
    let mut pixels = Vec::with_capacity(w * h);
    for row in buf.chunks(row_len).take(h) {
        for px in row[..w * channels * bytes_per_sample].chunks_exact(channels * bytes_per_sample) {
            let sample = |k: usize| -> u32 {
                if wide {
                    u16::from_be_bytes([px[2 * k], px[2 * k + 1]]) as u32
                } else {
                    px[k] as u32
                }
            };
            let v = (0..color).map(sample).sum::<u32>() / color as u32;
            pixels.push(v as u16);
        }
    }
    Ok(GrayImage {
        width: w,
        height: h,
        bit_depth: if wide { 16 } else { 8 },
        pixels,
    })
}

impl GrayImage {
    /// Intensities scaled to [0, 1] by the bit depth's full range.
    pub fn to_intensities(&self) -> Result<ImageSlice> {
        let max = if self.bit_depth == 16 { 65535.0 } else { 255.0 };
        ImageSlice::new(self.height, self.width, self.pixels.iter().map(|&v| v as f32 / max).collect())
    }
}

/// Decode a PNG image into [0, 1] intensities.
pub fn decode_intensities(bytes: &[u8]) -> Result<ImageSlice> {
    decode_gray(bytes)?.to_intensities()
}
