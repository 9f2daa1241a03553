//! Binary PPM (P6) and PGM (P5) read/write with no external decoder.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an H x W x 3 tensor with values in [0, 1] as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        other => {
            return Err(CoreError::Dimension(format!(
                "PPM needs H x W x 3, got {:?}",
                other
            )))
        }
    };
    let mut buf = Vec::with_capacity(h * w * 3 + 32);
    write!(buf, "P6\n{w} {h}\n255\n").expect("in-memory write");
    buf.extend(image.data().iter().map(|&v| quantize(v)));
    std::fs::write(path, buf).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Write a grayscale byte grid as binary PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    if data.len() != height * width {
        return Err(CoreError::Dimension(format!(
            "PGM data length {} for {}x{}",
            data.len(),
            height,
            width
        )));
    }
    let mut buf = Vec::with_capacity(data.len() + 32);
    write!(buf, "P5\n{width} {height}\n255\n").expect("in-memory write");
    buf.extend_from_slice(data);
    std::fs::write(path, buf).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn read_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    let mut cursor = bytes;
    let mut tokens = Vec::new();
    // header is ASCII tokens separated by whitespace; '#' starts a comment
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        let read = cursor
            .read_line(&mut line)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        if read == 0 {
            return Err(CoreError::Parse(format!(
                "{}: truncated header",
                path.display()
            )));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(String::from));
    }
    if tokens[0] != magic {
        return Err(CoreError::Parse(format!(
            "{}: expected {magic}, found {}",
            path.display(),
            tokens[0]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| CoreError::Parse(format!("{}: bad header token {s}", path.display())))
    };
    let w = parse(&tokens[1])?;
    let h = parse(&tokens[2])?;
    let maxval = parse(&tokens[3])?;
    if maxval != 255 {
        return Err(CoreError::Parse(format!(
            "{}: unsupported maxval {maxval}",
            path.display()
        )));
    }
    let consumed = bytes.len() - cursor.len();
    Ok((w, h, consumed))
}

/// Read a binary PPM into an H x W x 3 tensor with values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes =
        std::fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let (w, h, off) = read_header(&bytes, "P6", path)?;
    let need = w * h * 3;
    if bytes.len() < off + need {
        return Err(CoreError::Parse(format!(
            "{}: pixel data truncated",
            path.display()
        )));
    }
    let data: Vec<f64> = bytes[off..off + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Read a binary PGM as a raw byte grid.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes =
        std::fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let (w, h, off) = read_header(&bytes, "P5", path)?;
    let need = w * h;
    if bytes.len() < off + need {
        return Err(CoreError::Parse(format!(
            "{}: pixel data truncated",
            path.display()
        )));
    }
    Ok((h, w, bytes[off..off + need].to_vec()))
}
