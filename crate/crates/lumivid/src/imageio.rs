//! Binary PPM (P6) frame dumps and PFM storage for HDR environment maps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::lighting::EnvMap;
use crate::{Error, Result};

/// Write an RGB image with values in [0,1] (clamped) as binary PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "ppm {width}x{height} needs {} values, got {}",
            width * height * 3,
            rgb.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> =
        rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Read a binary PPM written by [`write_ppm`]; returns values in [0,1].
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line)?;
        header.push_str(&line);
    }
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("P6") {
        return Err(Error::Format("not a P6 ppm".into()));
    }
    let width: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad ppm width".into()))?;
    let height: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad ppm height".into()))?;
    let maxval: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format("only maxval 255 supported".into()));
    }
    let mut bytes = vec![0u8; width * height * 3];
    r.read_exact(&mut bytes)?;
    Ok((width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect()))
}

/// Store an environment map as little-endian 3-channel PFM. PFM rows run
/// bottom-to-top; a negative scale marks little-endian data.
pub fn write_pfm(path: &Path, env: &EnvMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "PF\n{} {}\n-1.0\n", env.width, env.height)?;
    for i in (0..env.height).rev() {
        for j in 0..env.width {
            for c in 0..3 {
                let v = env.data[(i * env.width + j) * 3 + c] as f32;
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a 3-channel PFM environment map (little- or big-endian).
pub fn read_pfm(path: &Path) -> Result<EnvMap> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "PF" {
        return Err(Error::Format("only color 'PF' pfm supported".into()));
    }
    line.clear();
    r.read_line(&mut line)?;
    let mut dims = line.split_ascii_whitespace();
    let width: usize = dims
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad pfm width".into()))?;
    let height: usize = dims
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad pfm height".into()))?;
    line.clear();
    r.read_line(&mut line)?;
    let scale: f32 =
        line.trim().parse().map_err(|_| Error::Format("bad pfm scale".into()))?;
    let little_endian = scale < 0.0;

    let mut bytes = vec![0u8; width * height * 3 * 4];
    r.read_exact(&mut bytes)?;
    let mut data = vec![0.0f64; width * height * 3];
    let mut buf = [0u8; 4];
    for (k, chunk) in bytes.chunks_exact(4).enumerate() {
        buf.copy_from_slice(chunk);
        let v = if little_endian { f32::from_le_bytes(buf) } else { f32::from_be_bytes(buf) };
        // rows are stored bottom-to-top
        let row_from_bottom = k / (width * 3);
        let rest = k % (width * 3);
        let i = height - 1 - row_from_bottom;
        data[i * width * 3 + rest] = v as f64;
    }
    EnvMap::new(width, height, data)
}
