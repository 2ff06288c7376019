//! ESRI ASCII grid (`.asc`) reader and writer.

use std::fmt::Write as _;
use std::path::Path;

use super::{Raster, Result, TerrainError, DEFAULT_NODATA};

#[derive(Default)]
struct Header {
    ncols: Option<usize>,
    nrows: Option<usize>,
    xll: Option<f64>,
    yll: Option<f64>,
    // `xllcenter`/`yllcenter` variants are resolved once cellsize is known.
    x_center: bool,
    y_center: bool,
    cellsize: Option<f64>,
    nodata: Option<f64>,
}

fn parse_number<T: std::str::FromStr>(token: &str, line: usize, what: &str) -> Result<T> {
    token.parse().map_err(|_| TerrainError::Parse {
        line,
        message: format!("invalid {what} value `{token}`"),
    })
}

impl Raster {
    /// Parses ESRI ASCII grid text. Header keys are case-insensitive; the first
    /// body row is the northernmost.
    pub fn from_ascii_grid(text: &str) -> Result<Raster> {
        let mut header = Header::default();
        let mut lines = text.lines().enumerate().peekable();

        while let Some(&(idx, line)) = lines.peek() {
            let lineno = idx + 1;
            let mut tokens = line.split_whitespace();
            let Some(key) = tokens.next() else {
                lines.next();
                continue;
            };
            if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
                break;
            }
            lines.next();
            let value = tokens.next().ok_or_else(|| TerrainError::Parse {
                line: lineno,
                message: format!("header key `{key}` has no value"),
            })?;
            if tokens.next().is_some() {
                return Err(TerrainError::Parse {
                    line: lineno,
                    message: format!("unexpected trailing tokens after `{key}`"),
                });
            }
            match key.to_ascii_lowercase().as_str() {
                "ncols" => header.ncols = Some(parse_number(value, lineno, "ncols")?),
                "nrows" => header.nrows = Some(parse_number(value, lineno, "nrows")?),
                "xllcorner" => header.xll = Some(parse_number(value, lineno, "xllcorner")?),
                "yllcorner" => header.yll = Some(parse_number(value, lineno, "yllcorner")?),
                "xllcenter" => {
                    header.xll = Some(parse_number(value, lineno, "xllcenter")?);
                    header.x_center = true;
                }
                "yllcenter" => {
                    header.yll = Some(parse_number(value, lineno, "yllcenter")?);
                    header.y_center = true;
                }
                "cellsize" => header.cellsize = Some(parse_number(value, lineno, "cellsize")?),
                "nodata_value" => {
                    header.nodata = Some(parse_number(value, lineno, "NODATA_value")?)
                }
                _ => {
                    return Err(TerrainError::Parse {
                        line: lineno,
                        message: format!("unknown header key `{key}`"),
                    })
                }
            }
        }

        let ncols = header.ncols.ok_or(TerrainError::MissingKey("ncols"))?;
        let nrows = header.nrows.ok_or(TerrainError::MissingKey("nrows"))?;
        let mut xll = header.xll.ok_or(TerrainError::MissingKey("xllcorner"))?;
        let mut yll = header.yll.ok_or(TerrainError::MissingKey("yllcorner"))?;
        let cellsize = header
            .cellsize
            .ok_or(TerrainError::MissingKey("cellsize"))?;
        let nodata = header.nodata.unwrap_or(DEFAULT_NODATA);
        if header.x_center {
            xll -= cellsize / 2.0;
        }
        if header.y_center {
            yll -= cellsize / 2.0;
        }

        let expected = ncols * nrows;
        let mut values = Vec::with_capacity(expected);
        let mut last_line = 0;
        for (idx, line) in lines {
            last_line = idx + 1;
            for token in line.split_whitespace() {
                if values.len() == expected {
                    return Err(TerrainError::Parse {
                        line: last_line,
                        message: format!("more than {expected} values in grid body"),
                    });
                }
                values.push(parse_number::<f64>(token, last_line, "cell")?);
            }
        }
        if values.len() != expected {
            return Err(TerrainError::Parse {
                line: last_line,
                message: format!("expected {expected} values, found {}", values.len()),
            });
        }
        Raster::new(ncols, nrows, xll, yll, cellsize, nodata, values)
    }

    /// Serializes to ESRI ASCII grid text using shortest round-trip float
    /// formatting.
    pub fn to_ascii_grid(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 8 + 128);
        let _ = writeln!(out, "ncols {}", self.ncols);
        let _ = writeln!(out, "nrows {}", self.nrows);
        let _ = writeln!(out, "xllcorner {}", self.xll);
        let _ = writeln!(out, "yllcorner {}", self.yll);
        let _ = writeln!(out, "cellsize {}", self.cellsize);
        let _ = writeln!(out, "NODATA_value {}", self.nodata);
        for row in self.values.chunks(self.ncols) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<Raster> {
        let text = std::fs::read_to_string(path)?;
        Raster::from_ascii_grid(&text)
    }

    pub fn write_ascii_grid(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ascii_grid())?;
        Ok(())
    }
}
