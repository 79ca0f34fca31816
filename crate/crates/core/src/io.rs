//! PGM (P2/P5) and PNG persistence for occupancy grids.
//!
//! Occupancy `v` is stored as `round(v * 255)` with maxval 255. A header
//! comment `# resolution <meters>` carries the cell size. Grids with unknown
//! cells add `# unknown 255-coded` and a companion `<stem>.mask.pgm` in which
//! 255 marks an unknown cell.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Dims, OccupancyGrid, DEFAULT_RESOLUTION};

const UNKNOWN_COMMENT: &str = "unknown 255-coded";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PgmFormat {
    /// P2
    Ascii,
    /// P5
    #[default]
    Binary,
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Path of the unknown-mask companion for a PGM file.
pub fn mask_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid");
    path.with_file_name(format!("{stem}.mask.pgm"))
}

fn encode(dims: Dims, bytes: &[u8], comments: &[String], format: PgmFormat) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len() * 4 + 64);
    let magic = match format {
        PgmFormat::Ascii => "P2",
        PgmFormat::Binary => "P5",
    };
    writeln!(out, "{magic}").unwrap();
    for c in comments {
        writeln!(out, "# {c}").unwrap();
    }
    writeln!(out, "{} {}", dims.width, dims.height).unwrap();
    writeln!(out, "255").unwrap();
    match format {
        PgmFormat::Binary => out.extend_from_slice(bytes),
        PgmFormat::Ascii => {
            for row in bytes.chunks(dims.width.max(1)) {
                let line: Vec<String> = row.iter().map(|b| b.to_string()).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
    }
    out
}

/// Serializes a grid to PGM bytes. The unknown mask, if any, is not included;
/// see [`write_pgm`].
pub fn encode_pgm(grid: &OccupancyGrid, format: PgmFormat) -> Vec<u8> {
    let bytes: Vec<u8> = grid.cells().iter().map(|&v| quantize(v)).collect();
    let mut comments = vec![format!("resolution {}", grid.resolution())];
    if grid.unknown_mask().is_some() {
        comments.push(UNKNOWN_COMMENT.to_string());
    }
    encode(grid.dims(), &bytes, &comments, format)
}

/// Writes `grid` to `path`, plus the `.mask.pgm` companion when it has unknown cells.
pub fn write_pgm(path: &Path, grid: &OccupancyGrid, format: PgmFormat) -> Result<()> {
    fs::write(path, encode_pgm(grid, format)).map_err(|e| Error::io(path, e))?;
    if let Some(mask) = grid.unknown_mask() {
        let bytes: Vec<u8> = mask.iter().map(|&u| if u { 255 } else { 0 }).collect();
        let comments = vec![format!("resolution {}", grid.resolution())];
        let mpath = mask_path(path);
        fs::write(&mpath, encode(grid.dims(), &bytes, &comments, format))
            .map_err(|e| Error::io(mpath, e))?;
    }
    Ok(())
}

pub(crate) struct RawPgm {
    pub dims: Dims,
    pub maxval: u16,
    pub comments: Vec<String>,
    pub samples: Vec<u16>,
}

pub(crate) fn decode_pgm(data: &[u8], path: &Path) -> Result<RawPgm> {
    let bad = |reason: &str| Error::Pgm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut comments = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    // magic, width, height, maxval
    while tokens.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= data.len() {
            return Err(bad("truncated header"));
        }
        if data[pos] == b'#' {
            let end = data[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map_or(data.len(), |e| pos + e);
            let text = String::from_utf8_lossy(&data[pos + 1..end]).trim().to_string();
            comments.push(text);
            pos = end;
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() && data[pos] != b'#' {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    let binary = match tokens[0].as_str() {
        "P5" => true,
        "P2" => false,
        other => return Err(bad(&format!("unsupported magic {other:?}"))),
    };
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad {what} {s:?}")));
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    let n = width * height;
    let samples: Vec<u16> = if binary {
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if data.len() < pos + need {
            return Err(bad("truncated raster"));
        }
        let raster = &data[pos..pos + need];
        if wide {
            raster.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        }
    } else {
        let text = String::from_utf8_lossy(&data[pos..]);
        let vals: Vec<u16> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace)
            .map(|t| t.parse::<u16>().map_err(|_| bad(&format!("bad sample {t:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() < n {
            return Err(bad("truncated raster"));
        }
        vals[..n].to_vec()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    Ok(RawPgm {
        dims: Dims::new(width, height),
        maxval: maxval as u16,
        comments,
        samples,
    })
}

/// Reads a PGM grid, including the resolution comment and unknown-mask companion.
pub fn read_pgm(path: &Path) -> Result<OccupancyGrid> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let raw = decode_pgm(&data, path)?;
    let resolution = raw
        .comments
        .iter()
        .find_map(|c| c.strip_prefix("resolution").and_then(|r| r.trim().parse::<f64>().ok()))
        .filter(|r| *r > 0.0)
        .unwrap_or(DEFAULT_RESOLUTION);
    let scale = raw.maxval as f64;
    let cells: Vec<f64> = if raw.maxval == 255 {
        raw.samples.iter().map(|&s| dequantize(s as u8)).collect()
    } else {
        raw.samples.iter().map(|&s| s as f64 / scale).collect()
    };
    let mut grid = OccupancyGrid::with_resolution(raw.dims, cells, resolution)?;
    if raw.comments.iter().any(|c| c == UNKNOWN_COMMENT) {
        let mpath = mask_path(path);
        let mdata = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mraw = decode_pgm(&mdata, &mpath)?;
        if mraw.dims != raw.dims {
            return Err(Error::Pgm {
                path: mpath,
                reason: "mask dimensions differ from grid".into(),
            });
        }
        let half = mraw.maxval / 2;
        grid = grid.with_unknown(mraw.samples.iter().map(|&s| s > half).collect())?;
    }
    Ok(grid)
}

/// Renders a grid as an 8-bit grayscale PNG (unknown cells render as 0).
pub fn write_png(path: &Path, grid: &OccupancyGrid) -> Result<()> {
    let bytes: Vec<u8> = grid.cells().iter().map(|&v| quantize(v)).collect();
    let img = image::GrayImage::from_raw(grid.width() as u32, grid.height() as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Png {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Writes an RGB PNG; `pixels` is row-major `[r, g, b]`.
pub fn write_png_rgb(path: &Path, dims: Dims, pixels: &[[u8; 3]]) -> Result<()> {
    let flat: Vec<u8> = pixels.iter().flatten().copied().collect();
    let img = image::RgbImage::from_raw(dims.width as u32, dims.height as u32, flat)
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Png {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Reads an 8-bit grayscale PNG back into a fully known grid.
pub fn read_png(path: &Path) -> Result<OccupancyGrid> {
    let img = image::open(path)
        .map_err(|e| Error::Png {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .into_luma8();
    let dims = Dims::new(img.width() as usize, img.height() as usize);
    OccupancyGrid::new(dims, img.into_raw().into_iter().map(dequantize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quantized(dims: Dims, seed: u64) -> OccupancyGrid {
        let mut s = seed;
        OccupancyGrid::from_fn(dims, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            dequantize((s >> 56) as u8)
        })
    }

    #[test]
    fn header_carries_resolution() {
        let mut g = OccupancyGrid::filled(Dims::new(2, 1), 1.0);
        g.set_resolution(0.1);
        let text = String::from_utf8(encode_pgm(&g, PgmFormat::Ascii)).unwrap();
        assert_eq!(text, "P2\n# resolution 0.1\n2 1\n255\n255 255\n");
    }

    #[test]
    fn mask_companion_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.pgm");
        let g = quantized(Dims::new(3, 2), 9)
            .with_unknown(vec![true, false, false, false, true, false])
            .unwrap();
        write_pgm(&path, &g, PgmFormat::Binary).unwrap();
        assert!(dir.path().join("snap.mask.pgm").exists());
        assert_eq!(read_pgm(&path).unwrap(), g);
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("x.pgm");
        assert!(decode_pgm(b"P6\n1 1\n255\n\0", p).is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\0", p).is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n300\n", p).is_err());
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let g = quantized(Dims::new(5, 3), 4);
        let path = dir.path().join("g.png");
        write_png(&path, &g).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.cells(), g.cells());
        let full = OccupancyGrid::filled(Dims::square(1), 1.0);
        write_png(&path, &full).unwrap();
        assert_eq!(image::open(&path).unwrap().into_luma8().into_raw(), vec![255]);
    }

    proptest! {
        #[test]
        fn quantized_grids_survive_both_formats(w in 1usize..9, h in 1usize..9, seed in any::<u64>(), ascii in any::<bool>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("g.pgm");
            let g = quantized(Dims::new(w, h), seed);
            let fmt = if ascii { PgmFormat::Ascii } else { PgmFormat::Binary };
            write_pgm(&path, &g, fmt).unwrap();
            prop_assert_eq!(read_pgm(&path).unwrap(), g);
        }
    }
}
