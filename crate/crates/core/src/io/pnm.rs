//! Binary PGM (P5) and PPM (P6) images, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::vision::ImageTensor;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM file (expected P5 or P6)".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("bad header byte at offset {pos}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| format!("header number: {e}"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("max value {maxval} unsupported, only 255"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty {width}x{height} image"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    Ok(Header {
        channels,
        width,
        height,
        offset: pos + 1,
    })
}

/// Decodes P5/P6 bytes; `origin` only labels errors.
pub fn decode_pnm(bytes: &[u8], origin: &Path) -> Result<ImageTensor> {
    let h = parse_header(bytes).map_err(|m| Error::ingest(origin, m))?;
    let plane = h.width * h.height;
    let payload = &bytes[h.offset..];
    if payload.len() != plane * h.channels {
        return Err(Error::ingest(
            origin,
            format!(
                "{}x{} image needs {} payload bytes, found {}",
                h.width,
                h.height,
                plane * h.channels,
                payload.len()
            ),
        ));
    }
    // PPM interleaves channels; the tensor is channel-major.
    let mut data = vec![0.0; payload.len()];
    for (i, &b) in payload.iter().enumerate() {
        let (pixel, c) = (i / h.channels, i % h.channels);
        data[c * plane + pixel] = f64::from(b) / 255.0;
    }
    ImageTensor::new(h.channels, h.height, h.width, data)
}

pub fn read_pnm(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P5 for one channel, P6 for three.
pub fn encode_pnm(image: &ImageTensor) -> Vec<u8> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.extend((0..plane * c).map(|i| to_byte(image.data()[(i % c) * plane + i / c])));
    out
}

pub fn write_pnm(path: &Path, image: &ImageTensor) -> Result<()> {
    std::fs::write(path, encode_pnm(image)).map_err(|e| Error::io(path, e))
}

/// Grayscale P5 from values in `[0, 1]`, stored as `round(255 v)`.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::dim(format!(
            "{width}x{height} map with {} values",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    Ok(out)
}
