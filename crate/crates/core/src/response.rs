//! Text-query / visual-token response maps.
//!
//! The response of `M` queries against `N` visual tokens is `Q X^T`
//! (`M x N`). Each region is scored by its strongest query, the best regions
//! are ranked, and the scores laid out on the patch grid can be written as a
//! grayscale PGM.
//!
//! Matrices load from CSV (one row per line) or from a small binary
//! container:
//!
//! ```text
//! "DPRM"  u16 version (1)  u8 dtype (1 = f64)  u8 reserved
//! u32 rows  u32 cols  rows x cols f64, row-major, little-endian
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MATRIX_MAGIC: &[u8; 4] = b"DPRM";
pub const MATRIX_VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;
const MATRIX_HEADER: usize = 16;

#[derive(Debug, Error)]
pub enum ResponseError {
    #[error("inner dimensions differ: queries have {query} columns, visual tokens {visual}")]
    DimensionMismatch { query: usize, visual: usize },
    #[error("grid {rows}x{cols} does not cover {n} regions")]
    Grid { rows: usize, cols: usize, n: usize },
    #[error("invalid matrix: {0}")]
    Matrix(String),
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rows x cols patch layout of the visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn check(&self, n: usize) -> Result<(), ResponseError> {
        if self.rows * self.cols != n || n == 0 {
            return Err(ResponseError::Grid {
                rows: self.rows,
                cols: self.cols,
                n,
            });
        }
        Ok(())
    }
}

impl std::str::FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("grid `{s}` is not ROWSxCOLS"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| format!("grid `{s}`: {e}"))
        };
        Ok(Grid {
            rows: parse(r)?,
            cols: parse(c)?,
        })
    }
}

fn check_finite(m: &Array2<f64>, what: &str) -> Result<(), ResponseError> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(ResponseError::Matrix(format!("{what} is empty")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ResponseError::Matrix(format!(
            "{what} has non-finite entries"
        )));
    }
    Ok(())
}

/// `q x^T`: entry `(m, n)` is the dot product of query `m` and token `n`.
pub fn mixed_response(q: &Array2<f64>, x: &Array2<f64>) -> Result<Array2<f64>, ResponseError> {
    if q.ncols() != x.ncols() {
        return Err(ResponseError::DimensionMismatch {
            query: q.ncols(),
            visual: x.ncols(),
        });
    }
    check_finite(q, "query matrix")?;
    check_finite(x, "visual matrix")?;
    Ok(q.dot(&x.t()))
}

/// Per-region maximum over queries.
pub fn region_scores(response: &Array2<f64>) -> Array1<f64> {
    response.fold_axis(Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b))
}

/// Indices of the `k` best scores, descending, ties toward the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Top `k` regions of a response matrix with their scores.
pub fn top_regions(response: &Array2<f64>, k: usize) -> Result<Vec<(usize, f64)>, ResponseError> {
    if response.is_empty() {
        return Err(ResponseError::Matrix("response is empty".into()));
    }
    let scores = region_scores(response);
    let scores = scores.as_slice().expect("contiguous");
    Ok(top_k(scores, k)
        .into_iter()
        .map(|i| (i, scores[i]))
        .collect())
}

/// Min-max normalization to `[0, 1]`; a constant input maps to 0.5.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// 8-bit levels, rounding half up.
pub fn to_pixels(heat: &[f64]) -> Vec<u8> {
    heat.iter()
        .map(|h| (h * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMap {
    pub raw: Vec<Vec<f64>>,
    pub region_scores: Vec<f64>,
    pub top_indices: Vec<usize>,
    pub grid: Grid,
    /// Grid-shaped scores normalized to `[0, 1]`, row-major.
    pub heat: Vec<f64>,
}

impl ResponseMap {
    pub fn build(
        q: &Array2<f64>,
        x: &Array2<f64>,
        grid: Grid,
        k: usize,
    ) -> Result<Self, ResponseError> {
        grid.check(x.nrows())?;
        let raw = mixed_response(q, x)?;
        let scores = region_scores(&raw).to_vec();
        let top_indices = top_k(&scores, k);
        Ok(Self {
            raw: raw.outer_iter().map(|r| r.to_vec()).collect(),
            heat: normalize(&scores),
            region_scores: scores,
            top_indices,
            grid,
        })
    }

    pub fn pixels(&self) -> Vec<u8> {
        to_pixels(&self.heat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmFormat {
    /// Binary.
    P5,
    /// Plain text.
    P2,
}

pub fn encode_pgm(pixels: &[u8], grid: Grid, format: PgmFormat) -> Result<Vec<u8>, ResponseError> {
    grid.check(pixels.len())?;
    let mut out = Vec::new();
    match format {
        PgmFormat::P5 => {
            write!(out, "P5\n{} {}\n255\n", grid.cols, grid.rows)?;
            out.extend_from_slice(pixels);
        }
        PgmFormat::P2 => {
            write!(out, "P2\n{} {}\n255\n", grid.cols, grid.rows)?;
            for row in pixels.chunks(grid.cols) {
                let line: Vec<String> = row.iter().map(u8::to_string).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
    }
    Ok(out)
}

pub fn export_heatmap(
    map: &ResponseMap,
    path: impl AsRef<Path>,
    format: PgmFormat,
) -> Result<(), ResponseError> {
    let bytes = encode_pgm(&map.pixels(), map.grid, format)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_matrix(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_HEADER + 8 * m.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(0);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>, ResponseError> {
    let bad = |m: &str| Err(ResponseError::Matrix(m.into()));
    if bytes.len() < MATRIX_HEADER {
        return bad("truncated header");
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return bad("bad magic");
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != MATRIX_VERSION {
        return bad("unsupported version");
    }
    if bytes[6] != DTYPE_F64 {
        return bad("unsupported dtype");
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[MATRIX_HEADER..];
    if payload.len() != rows * cols * 8 {
        return bad("payload length does not match dimensions");
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| ResponseError::Matrix(e.to_string()))
}

/// Comma-separated rows without a header.
pub fn parse_csv_matrix(text: &str) -> Result<Array2<f64>, ResponseError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ResponseError::Csv {
            line: i + 1,
            message: e.to_string(),
        })?;
        if cols.is_some_and(|c| c != record.len()) {
            return Err(ResponseError::Csv {
                line: i + 1,
                message: format!(
                    "expected {} fields, found {}",
                    cols.unwrap_or(0),
                    record.len()
                ),
            });
        }
        cols = Some(record.len());
        for field in record.iter() {
            values.push(field.parse::<f64>().map_err(|e| ResponseError::Csv {
                line: i + 1,
                message: format!("`{field}`: {e}"),
            })?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), values)
        .map_err(|e| ResponseError::Matrix(e.to_string()))
}

/// Loads a matrix, choosing the format from the magic bytes.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>, ResponseError> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MATRIX_MAGIC) {
        decode_matrix(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| ResponseError::Matrix("neither a DPRM file nor UTF-8 CSV".into()))?;
        parse_csv_matrix(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_response() {
        let i = Array2::<f64>::eye(3);
        assert_eq!(mixed_response(&i, &i).unwrap(), i);
    }

    #[test]
    fn zero_queries() {
        let q = Array2::<f64>::zeros((2, 4));
        let x = array![[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]];
        assert!(mixed_response(&q, &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let q = Array2::<f64>::zeros((2, 3));
        let x = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            mixed_response(&q, &x),
            Err(ResponseError::DimensionMismatch {
                query: 3,
                visual: 4
            })
        ));
    }

    #[test]
    fn top_regions_saturate_and_tie() {
        let r = array![[1.0, 3.0, 3.0, 0.0]];
        let top = top_regions(&r, 10).unwrap();
        assert_eq!(
            top.iter().map(|t| t.0).collect::<Vec<_>>(),
            vec![1, 2, 0, 3]
        );
        let r = array![[1.0, 0.0], [0.0, 2.0]];
        assert_eq!(top_regions(&r, 1).unwrap(), vec![(1, 2.0)]);
    }

    #[test]
    fn pixel_levels() {
        assert_eq!(
            to_pixels(&normalize(&[0.0, 1.0, 0.5, 1.0])),
            vec![0, 255, 128, 255]
        );
        assert_eq!(to_pixels(&normalize(&[3.0; 4])), vec![128; 4]);
    }

    #[test]
    fn pgm_headers() {
        let grid = Grid { rows: 1, cols: 2 };
        assert_eq!(
            encode_pgm(&[0, 255], grid, PgmFormat::P5).unwrap(),
            b"P5\n2 1\n255\n\x00\xff"
        );
        assert_eq!(
            encode_pgm(&[0, 255], grid, PgmFormat::P2).unwrap(),
            b"P2\n2 1\n255\n0 255\n"
        );
        assert!(encode_pgm(&[0, 1, 2], grid, PgmFormat::P5).is_err());
    }

    #[test]
    fn matrix_round_trip_and_csv() {
        let m = array![[1.5, -2.0], [0.25, 1e-300]];
        assert_eq!(decode_matrix(&encode_matrix(&m)).unwrap(), m);
        let mut bytes = encode_matrix(&m);
        bytes.pop();
        assert!(decode_matrix(&bytes).is_err());
        assert_eq!(parse_csv_matrix("1.5, -2\n0.25,1e-300\n").unwrap(), m);
        assert!(matches!(
            parse_csv_matrix("1,2\n3\n"),
            Err(ResponseError::Csv { line: 2, .. })
        ));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(
            "24x24".parse::<Grid>().unwrap(),
            Grid { rows: 24, cols: 24 }
        );
        assert!("24".parse::<Grid>().is_err());
    }
}
