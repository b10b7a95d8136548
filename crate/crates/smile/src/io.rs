//! On-disk formats.
//!
//! Cubes and abundance maps: a JSON header `<stem>.hdr` next to raw
//! little-endian `f32` samples in `<stem>.bin`, pixel-major with bands
//! interleaved. Endmembers and kernels: CSV, one row per line, lines starting
//! with `#` ignored. Abundance images: binary PGM scaled so the band maximum
//! maps to 255.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smile_core::diffcore::Tensor;
use smile_core::diagnostics::{AffinityRecord, GradientGeometry};
use smile_core::lmm::{AbundanceMap, EndmemberMatrix, HsiCube};
use smile_core::trainer::LossRecord;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: String,
    pub layout: String,
    pub endianness: String,
}

impl CubeHeader {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        CubeHeader { height, width, channels, dtype: "f32".into(), layout: "bip".into(), endianness: "little".into() }
    }
}

/// `(header path, data path)` for a stem, `.hdr` or `.bin` path.
pub fn cube_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("hdr") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("hdr"), with("bin"))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Writes `height × width × channels` samples; values are stored as `f32`.
pub fn write_raster(path: &Path, height: usize, width: usize, channels: usize, data: &[f64]) -> Result<()> {
    let (hdr, bin) = cube_paths(path);
    let header = CubeHeader::new(height, width, channels);
    let text = serde_json::to_string_pretty(&header).map_err(|e| CliError::format(&hdr, e.to_string()))?;
    write_file(&hdr, format!("{text}\n").as_bytes())?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(&bin, &bytes)
}

pub fn read_raster(path: &Path) -> Result<(CubeHeader, Vec<f64>)> {
    let (hdr, bin) = cube_paths(path);
    let header: CubeHeader =
        serde_json::from_str(&read_text(&hdr)?).map_err(|e| CliError::format(&hdr, e.to_string()))?;
    if header.dtype != "f32" || header.layout != "bip" || header.endianness != "little" {
        return Err(CliError::format(
            &hdr,
            format!("unsupported encoding {}/{}/{}", header.dtype, header.layout, header.endianness),
        ));
    }
    let bytes = read_file(&bin)?;
    let expected = header.height * header.width * header.channels * 4;
    if bytes.len() != expected {
        return Err(CliError::format(&bin, format!("{} bytes, header implies {}", bytes.len(), expected)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok((header, data))
}

pub fn write_cube(path: &Path, cube: &HsiCube) -> Result<()> {
    write_raster(path, cube.height(), cube.width(), cube.channels(), cube.data())
}

pub fn read_cube(path: &Path) -> Result<HsiCube> {
    let (h, data) = read_raster(path)?;
    Ok(HsiCube::new(h.height, h.width, h.channels, data)?)
}

pub fn write_abundance(path: &Path, a: &AbundanceMap) -> Result<()> {
    write_raster(path, a.height(), a.width(), a.p(), a.data())
}

pub fn read_abundance(path: &Path) -> Result<AbundanceMap> {
    let (h, data) = read_raster(path)?;
    Ok(AbundanceMap::new(h.height, h.width, h.channels, data)?)
}

/// What a map looks like after a write/read cycle.
pub fn f32_rounded(a: &AbundanceMap) -> AbundanceMap {
    let data = a.data().iter().map(|&v| v as f32 as f64).collect();
    AbundanceMap::new(a.height(), a.width(), a.p(), data).expect("same shape")
}

fn csv_rows(rows: impl Iterator<Item = Vec<f64>>, header: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn parse_rows(path: &Path, text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| CliError::format(path, format!("line {}: {e}", n + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Values are printed in shortest round-trip form, so reading back is exact.
pub fn write_endmembers(path: &Path, e: &EndmemberMatrix) -> Result<()> {
    let header = format!("{} endmembers x {} bands", e.p(), e.channels());
    write_file(path, csv_rows(e.rows().map(<[f64]>::to_vec), Some(&header)).as_bytes())
}

pub fn read_endmembers(path: &Path) -> Result<EndmemberMatrix> {
    let rows = parse_rows(path, &read_text(path)?)?;
    EndmemberMatrix::from_rows(&rows).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_kernel(path: &Path, k: &Tensor) -> Result<()> {
    let side = k.shape()[1];
    write_file(path, csv_rows(k.data().chunks(side).map(<[f64]>::to_vec), None).as_bytes())
}

pub fn read_kernel(path: &Path) -> Result<Tensor> {
    let rows = parse_rows(path, &read_text(path)?)?;
    let side = rows.len();
    if rows.iter().any(|r| r.len() != side) {
        return Err(CliError::format(path, "kernel must be square"));
    }
    Ok(Tensor::new(vec![side, side], rows.concat())?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:?}")).unwrap_or_default()
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iteration,l1,l2,l3,l4,total\n");
    for r in history {
        out.push_str(&format!("{},{:?},{},{:?},{:?},{:?}\n", r.iteration, r.l1, opt(r.l2), r.l3, r.l4, r.total));
    }
    out
}

pub fn affinity_csv(records: &[AffinityRecord]) -> String {
    let mut out = String::from("iteration,lambda,bound,dot,cos,l1_before,l1_mtl_step,l1_single_step,padded_cos\n");
    for r in records {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.iteration, r.lambda, r.bound, r.dot, r.cos, r.l1_before, r.l1_mtl_step, r.l1_single_step, r.padded_cos
        ));
    }
    out
}

pub fn geometry_csv(rows: &[(usize, GradientGeometry)]) -> String {
    let mut out = String::from("iteration,dot,cos,padded_cos,norm1,norm2,degenerate\n");
    for (t, g) in rows {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{}\n",
            t, g.dot, g.cos, g.padded_cos, g.norm1, g.norm2, g.degenerate
        ));
    }
    out
}

/// Binary PGM of one band, scaled so its maximum becomes 255.
pub fn pgm(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 && v > 0.0 {
            (v / max * 255.0).round().min(255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    let mut bytes = text.into_bytes();
    bytes.write_all(b"\n").expect("writing to a vector");
    write_file(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::format(path, e.to_string()))
}
