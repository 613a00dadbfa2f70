//! 16-bit binary PGM (P5, big-endian samples).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, GrayImage};

pub const MAX_SAMPLE: u16 = u16::MAX;

pub fn quantize(value: f64) -> u16 {
    (value.clamp(0.0, 1.0) * MAX_SAMPLE as f64).round() as u16
}

pub fn dequantize(sample: u16) -> f64 {
    sample as f64 / MAX_SAMPLE as f64
}

pub fn encode(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", image.width(), image.height(), MAX_SAMPLE).into_bytes();
    out.reserve(image.data().len() * 2);
    for &v in image.data() {
        out.extend_from_slice(&quantize(v).to_be_bytes());
    }
    out
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(image)).map_err(|e| DataError::io(path, e))?;
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Width and height from the header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PgmHeader {
    pub width: usize,
    pub height: usize,
    pub max_value: usize,
}

fn next_token<R: BufRead>(r: &mut R, path: &Path) -> Result<String, DataError> {
    let mut token = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte).map_err(|e| DataError::io(path, e))? == 0 {
            return Err(DataError::parse(path, "truncated PGM header"));
        }
        let b = byte[0];
        if b == b'#' && token.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip).map_err(|e| DataError::io(path, e))?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(b);
    }
    String::from_utf8(token).map_err(|_| DataError::parse(path, "non-ASCII PGM header"))
}

fn read_header<R: BufRead>(r: &mut R, path: &Path) -> Result<PgmHeader, DataError> {
    if next_token(r, path)? != "P5" {
        return Err(DataError::parse(path, "not a binary PGM (P5)"));
    }
    let mut nums = [0usize; 3];
    for n in &mut nums {
        *n = next_token(r, path)?
            .parse()
            .map_err(|_| DataError::parse(path, "bad PGM header field"))?;
    }
    let [width, height, max_value] = nums;
    if width == 0 || height == 0 || max_value == 0 || max_value > MAX_SAMPLE as usize {
        return Err(DataError::parse(path, "PGM header out of range"));
    }
    Ok(PgmHeader {
        width,
        height,
        max_value,
    })
}

pub fn read_pgm_header(path: &Path) -> Result<PgmHeader, DataError> {
    let file = File::open(path).map_err(|e| DataError::open(path, e))?;
    read_header(&mut BufReader::new(file), path)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, DataError> {
    let file = File::open(path).map_err(|e| DataError::open(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r, path)?;
    if header.max_value != MAX_SAMPLE as usize {
        return Err(DataError::parse(path, "expected 16-bit samples (maxval 65535)"));
    }
    let n = header.width * header.height;
    let mut raw = vec![0u8; n * 2];
    r.read_exact(&mut raw).map_err(|_| {
        DataError::DimensionMismatch {
            path: path.to_path_buf(),
            detail: format!("pixel data shorter than {}x{} header", header.width, header.height),
        }
    })?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| DataError::io(path, e))? != 0 {
        return Err(DataError::DimensionMismatch {
            path: path.to_path_buf(),
            detail: format!("pixel data longer than {}x{} header", header.width, header.height),
        });
    }
    let data = raw
        .chunks_exact(2)
        .map(|b| dequantize(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    GrayImage::new(header.height, header.width, data)
}
