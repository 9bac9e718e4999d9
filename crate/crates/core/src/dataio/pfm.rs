//! Grayscale PFM rasters (32-bit float, little-endian, bottom-up rows).

use std::io::{BufRead, Read, Write};
use std::path::Path;

use super::DataError;

pub fn write_pfm(path: &Path, height: usize, width: usize, data: &[f32]) -> Result<(), DataError> {
    assert_eq!(data.len(), height * width);
    let file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let hdr = format!("Pf\n{width} {height}\n-1.0\n");
    w.write_all(hdr.as_bytes()).map_err(|e| DataError::io(path, e))?;
    // PFM stores rows bottom to top.
    for y in (0..height).rev() {
        for x in 0..width {
            w.write_all(&data[y * width + x].to_le_bytes())
                .map_err(|e| DataError::io(path, e))?;
        }
    }
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>), DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| DataError::io(path, e))?;
    if line.trim() != "Pf" {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            reason: format!("not a grayscale PFM (magic {line:?})"),
        });
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| DataError::io(path, e))?;
    let mut dims = line.split_whitespace();
    let parse = |s: Option<&str>| -> Result<usize, DataError> {
        s.and_then(|v| v.parse().ok()).ok_or_else(|| DataError::Malformed {
            path: path.to_path_buf(),
            reason: "bad dimensions line".into(),
        })
    };
    let width = parse(dims.next())?;
    let height = parse(dims.next())?;
    line.clear();
    r.read_line(&mut line).map_err(|e| DataError::io(path, e))?;
    let scale: f32 = line.trim().parse().map_err(|_| DataError::Malformed {
        path: path.to_path_buf(),
        reason: "bad scale line".into(),
    })?;
    let little_endian = scale < 0.0;
    let mut bytes = vec![0u8; width * height * 4];
    r.read_exact(&mut bytes).map_err(|e| DataError::io(path, e))?;
    let mut data = vec![0f32; width * height];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // Flip back to top-down rows.
        let y = height - 1 - i / width;
        let x = i % width;
        data[y * width + x] = v;
    }
    Ok((height, width, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip() {
        let dir = std::env::temp_dir().join(format!("rigsplat-pfm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("depth.pfm");
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 + 0.25).collect();
        write_pfm(&path, 3, 4, &data).unwrap();
        let (h, w, back) = read_pfm(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(back, data);
        std::fs::remove_dir_all(&dir).ok();
    }
}
