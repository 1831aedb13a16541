//! PNG input/output. Indexed masks are read and written without palette
//! expansion; the index map is the authoritative mask representation.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Seek};
use std::path::Path;

pub fn write_rgb_png(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    assert_eq!(c, 3);
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let data: Vec<u8> = pixels.iter().copied().collect();
    writer.write_image_data(&data)?;
    Ok(())
}

pub fn write_indexed_png(path: &Path, labels: &Array2<u8>, palette: &[[u8; 3]]) -> Result<()> {
    let (h, w) = labels.dim();
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    let flat: Vec<u8> = palette.iter().flat_map(|rgb| rgb.iter().copied()).collect();
    encoder.set_palette(flat);
    let mut writer = encoder.write_header()?;
    let data: Vec<u8> = labels.iter().copied().collect();
    writer.write_image_data(&data)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<Array3<u8>> {
    let file = File::open(path)?;
    decode_rgb(BufReader::new(file))
}

/// Decode any 8/16-bit gray/RGB/indexed PNG stream into 8-bit RGB.
pub fn decode_rgb<R: BufRead + Seek>(reader: R) -> Result<Array3<u8>> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut out = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * channels;
            let px: [u8; 3] = match info.color_type {
                png::ColorType::Rgb | png::ColorType::Rgba => {
                    [buf[base], buf[base + 1], buf[base + 2]]
                }
                png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
                    [buf[base], buf[base], buf[base]]
                }
                other => {
                    return Err(Error::UnsupportedImage(format!(
                        "unexpected color type after expansion: {other:?}"
                    )))
                }
            };
            out[(y, x, 0)] = px[0];
            out[(y, x, 1)] = px[1];
            out[(y, x, 2)] = px[2];
        }
    }
    Ok(out)
}

pub fn read_indexed_png(path: &Path) -> Result<(Array2<u8>, Vec<[u8; 3]>)> {
    let file = File::open(path)?;
    decode_indexed(BufReader::new(file))
}

/// Decode an indexed PNG keeping raw palette indices.
pub fn decode_indexed<R: BufRead + Seek>(reader: R) -> Result<(Array2<u8>, Vec<[u8; 3]>)> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Indexed {
        return Err(Error::UnsupportedImage(format!(
            "expected an indexed PNG, found {:?}",
            info.color_type
        )));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedImage(format!(
            "expected 8-bit palette indices, found {:?}",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let palette_bytes = reader
        .info()
        .palette
        .as_ref()
        .ok_or_else(|| Error::UnsupportedImage("indexed PNG without a palette".into()))?;
    let palette: Vec<[u8; 3]> = palette_bytes
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let mut labels = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            labels[(y, x)] = buf[y * w + x];
        }
    }
    Ok((labels, palette))
}
