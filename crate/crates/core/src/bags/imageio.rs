//! PNG and binary PPM (P6) readers and writers for 8-bit RGB images.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use super::SourceImage;
use crate::error::{Error, Result};

/// Raw RGB pixels without label or identifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn into_source(self, label: bool, id: impl Into<String>) -> Result<SourceImage> {
        SourceImage::new(self.width, self.height, self.data, label, id)
    }
}

impl From<&SourceImage> for Rgb8 {
    fn from(img: &SourceImage) -> Self {
        Rgb8 {
            width: img.width,
            height: img.height,
            data: img.data.clone(),
        }
    }
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8> {
    let mut pos = 0;
    let mut next_token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token()? != "P6" {
        return Err(Error::Image("not a binary PPM (P6) file".into()));
    }
    let mut number = |what: &str| -> Result<usize> {
        let tok = next_token()?;
        tok.parse()
            .map_err(|_| Error::Image(format!("bad PPM {what}: {tok:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::Image(format!("only 8-bit PPM is supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * 3;
    let data = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Image("truncated PPM raster".into()))?
        .to_vec();
    if width == 0 || height == 0 {
        return Err(Error::Image("empty PPM image".into()));
    }
    Ok(Rgb8 { width, height, data })
}

pub fn encode_png(img: &Rgb8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Image(format!("PNG encode: {e}")))?;
        writer
            .write_image_data(&img.data)
            .map_err(|e| Error::Image(format!("PNG encode: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::Image(format!("PNG encode: {e}")))?;
    }
    Ok(out)
}

/// Decode any 8-bit PNG to RGB (gray is replicated, alpha is dropped).
pub fn decode_png(bytes: &[u8]) -> Result<Rgb8> {
    let err = |e: png::DecodingError| Error::Image(format!("PNG decode: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let line = &buf[y * info.line_size..][..w * channels];
        for px in line.chunks_exact(channels) {
            match channels {
                1 | 2 => data.extend_from_slice(&[px[0]; 3]),
                _ => data.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok(Rgb8 {
        width: w,
        height: h,
        data,
    })
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Read a PNG or PPM file, chosen by content signature.
pub fn read_image(path: &Path) -> Result<Rgb8> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else {
        decode_png(&bytes)
    }
}

/// Write as PPM when the extension is `.ppm`, PNG otherwise.
pub fn write_image(path: &Path, img: &Rgb8) -> Result<()> {
    let bytes = if is_ppm(path) {
        encode_ppm(img)
    } else {
        encode_png(img)?
    };
    File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(&bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}
