//! Binary PPM (P6, maxval 255) reader and writer.

use std::io::Write;
use std::path::Path;

use super::{Image, CHANNELS};
use crate::error::{Error, Result};

/// Write an image as binary PPM, quantizing [0,1] values to 8 bits.
pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + img.width() * img.height() * CHANNELS);
    write!(buf, "P6\n{} {}\n255\n", img.width(), img.height())?;
    for &v in img.pixels() {
        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a binary PPM. Header tokens may be separated by any whitespace and
/// `#` comments; only maxval 255 is supported.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0;

    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and comments
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
            return Err(Error::Parse {
                line: 0,
                msg: "unexpected end of PPM header".to_string(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(&bytes)?;
    if magic != "P6" {
        return Err(Error::Parse {
            line: 0,
            msg: format!("not a binary PPM (magic {magic:?})"),
        });
    }
    let parse = |tok: String| -> Result<usize> {
        tok.parse::<usize>().map_err(|_| Error::Parse {
            line: 0,
            msg: format!("bad PPM header token {tok:?}"),
        })
    };
    let width = parse(next_token(&bytes)?)?;
    let height = parse(next_token(&bytes)?)?;
    let maxval = parse(next_token(&bytes)?)?;
    if maxval != 255 {
        return Err(Error::Parse {
            line: 0,
            msg: format!("unsupported PPM maxval {maxval}"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * CHANNELS;
    if bytes.len() < pos + need {
        return Err(Error::Parse {
            line: 0,
            msg: format!(
                "PPM raster truncated: need {need} bytes, have {}",
                bytes.len().saturating_sub(pos)
            ),
        });
    }
    let pixels = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::new(width, height, pixels)
}
