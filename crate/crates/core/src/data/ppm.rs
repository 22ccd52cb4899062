//! Binary PPM (P6, 8-bit) images as `H × W × 3` tensors in [0, 1].

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STREAM: &str = "ppm";

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let magic = bytes.get(..2).ok_or(Error::Truncated(STREAM))?;
    match magic {
        b"P6" => {}
        [b'P', b'1'..=b'5'] | [b'P', b'7'] => {
            return Err(Error::PpmUnsupported(String::from_utf8_lossy(magic).into_owned()))
        }
        _ => return Err(Error::PpmMagic(String::from_utf8_lossy(magic).into_owned())),
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // Whitespace and `#` comments separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), Some(b'\n') | None) {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Truncated(STREAM)),
            }
        }
        if i == 0 && pos == 2 {
            return Err(Error::PpmHeader("missing whitespace after magic".into()));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = digits
            .parse()
            .map_err(|_| Error::PpmHeader(format!("expected a number at byte {start}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => {
            return Err(Error::PpmHeader(
                "maxval must be followed by one whitespace byte".into(),
            ))
        }
        None => return Err(Error::Truncated(STREAM)),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::PpmMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(Error::PpmHeader(format!("zero image size {width}×{height}")));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        data_start: pos,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height * 3;
    let pixels = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or(Error::Truncated(STREAM))?;
    Tensor::new(
        [h.height, h.width, 3],
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Encodes an `H × W × 3` tensor, clamping to [0, 1] and rounding to the nearest byte.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::shape(format!(
            "PPM needs an H×W×3 tensor, got {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn save_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}
