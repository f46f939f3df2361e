//! 6x6 pressure frames and their text form.
//!
//! A frame file holds one or more frames. Each frame is a header line
//! `t_ms=<int>` followed by six lines of six comma-separated cell values,
//! row-major.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const GRID: usize = 6;
pub const CELLS: usize = GRID * GRID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsrFrame {
    pub t_ms: u64,
    #[serde(with = "cells_serde")]
    pub cells: [f64; CELLS],
}

impl FsrFrame {
    pub fn new(t_ms: u64, cells: [f64; CELLS]) -> Self {
        FsrFrame { t_ms, cells }
    }

    pub fn zeros(t_ms: u64) -> Self {
        FsrFrame {
            t_ms,
            cells: [0.0; CELLS],
        }
    }

    pub fn from_rows(t_ms: u64, rows: [[f64; GRID]; GRID]) -> Self {
        let mut cells = [0.0; CELLS];
        for (r, row) in rows.iter().enumerate() {
            cells[r * GRID..(r + 1) * GRID].copy_from_slice(row);
        }
        FsrFrame { t_ms, cells }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.cells[row * GRID + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.cells[row * GRID + col]
    }

    pub fn row_sums(&self) -> [f64; GRID] {
        let mut sums = [0.0; GRID];
        for (r, sum) in sums.iter_mut().enumerate() {
            *sum = self.cells[r * GRID..(r + 1) * GRID].iter().sum();
        }
        sums
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().sum()
    }

    pub fn is_border(row: usize, col: usize) -> bool {
        row == 0 || col == 0 || row == GRID - 1 || col == GRID - 1
    }

    /// Six comma-separated rows without the header.
    pub fn grid_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..GRID {
            for c in 0..GRID {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.at(r, c));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("t_ms={}\n{}", self.t_ms, self.grid_csv())
    }
}

#[derive(Debug, Error)]
pub enum FrameParseError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: frame truncated after {rows} of 6 rows")]
    Truncated { line: usize, rows: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_frames<W: Write>(mut out: W, frames: &[FsrFrame]) -> io::Result<()> {
    for f in frames {
        out.write_all(f.to_csv().as_bytes())?;
    }
    out.flush()
}

/// Parses every frame in a frame file. Blank lines between frames are skipped.
pub fn read_frames<R: BufRead>(input: R) -> Result<Vec<FsrFrame>, FrameParseError> {
    let mut frames = Vec::new();
    let mut current: Option<(u64, Vec<f64>, usize)> = None;
    let mut last_line = 0;
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            if let Some((_, ref cells, _)) = current {
                return Err(FrameParseError::Truncated {
                    line: lineno,
                    rows: cells.len() / GRID,
                });
            }
            continue;
        }
        match current.take() {
            None => {
                let t = line
                    .strip_prefix("t_ms=")
                    .ok_or_else(|| FrameParseError::Malformed {
                        line: lineno,
                        msg: format!("expected `t_ms=<int>` header, found `{line}`"),
                    })?;
                let t_ms = t.trim().parse::<u64>().map_err(|e| FrameParseError::Malformed {
                    line: lineno,
                    msg: format!("bad timestamp `{t}`: {e}"),
                })?;
                current = Some((t_ms, Vec::with_capacity(CELLS), lineno));
            }
            Some((t_ms, mut cells, start)) => {
                if line.starts_with("t_ms=") {
                    return Err(FrameParseError::Truncated {
                        line: lineno,
                        rows: cells.len() / GRID,
                    });
                }
                let row: Vec<&str> = line.split(',').collect();
                if row.len() != GRID {
                    return Err(FrameParseError::Malformed {
                        line: lineno,
                        msg: format!("expected 6 values, found {}", row.len()),
                    });
                }
                for v in row {
                    let x = v.trim().parse::<f64>().map_err(|e| FrameParseError::Malformed {
                        line: lineno,
                        msg: format!("bad cell value `{v}`: {e}"),
                    })?;
                    if !(x.is_finite() && x >= 0.0) {
                        return Err(FrameParseError::Malformed {
                            line: lineno,
                            msg: format!("cell value {x} is not a non-negative number"),
                        });
                    }
                    cells.push(x);
                }
                if cells.len() == CELLS {
                    let mut arr = [0.0; CELLS];
                    arr.copy_from_slice(&cells);
                    frames.push(FsrFrame::new(t_ms, arr));
                } else {
                    current = Some((t_ms, cells, start));
                }
            }
        }
    }
    if let Some((_, cells, _)) = current {
        return Err(FrameParseError::Truncated {
            line: last_line + 1,
            rows: cells.len() / GRID,
        });
    }
    Ok(frames)
}

mod cells_serde {
    use super::*;
    use serde::de::Error as _;

    pub fn serialize<S: Serializer>(cells: &[f64; CELLS], s: S) -> Result<S::Ok, S::Error> {
        cells.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; CELLS], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        let n = v.len();
        v.try_into()
            .map_err(|_| D::Error::invalid_length(n, &"exactly 36 cells"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FsrFrame {
        let mut cells = [0.0; CELLS];
        for (i, c) in cells.iter_mut().enumerate() {
            *c = i as f64 * 0.25;
        }
        FsrFrame::new(1200, cells)
    }

    #[test]
    fn csv_round_trip() {
        let frames = vec![sample(), FsrFrame::zeros(1300)];
        let mut buf = Vec::new();
        write_frames(&mut buf, &frames).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_ms=1200\n0,0.25,0.5,"));
        assert_eq!(text.lines().count(), 14);
        assert_eq!(read_frames(&buf[..]).unwrap(), frames);
    }

    #[test]
    fn truncated_frame_names_line() {
        let text = "t_ms=0\n1,1,1,1,1,1\n1,1,1,1,1,1\n";
        let err = read_frames(text.as_bytes()).unwrap_err();
        assert!(matches!(err, FrameParseError::Truncated { line: 4, rows: 2 }), "{err}");
        let text = "t_ms=0\n1,1,1,1,1\n";
        let err = read_frames(text.as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
        let text = "t_ms=0\n1,1,1,1,1,-3\n";
        assert!(read_frames(text.as_bytes()).is_err());
        assert!(read_frames("bogus\n".as_bytes()).is_err());
    }

    #[test]
    fn serde_requires_36_cells() {
        let f = sample();
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<FsrFrame>(&json).unwrap(), f);
        let short = r#"{"t_ms":1,"cells":[1,2,3]}"#;
        assert!(serde_json::from_str::<FsrFrame>(short).is_err());
    }

    #[test]
    fn row_sums_and_border() {
        let f = sample();
        assert_eq!(f.row_sums().iter().sum::<f64>(), f.total());
        assert!(FsrFrame::is_border(0, 3));
        assert!(FsrFrame::is_border(4, 5));
        assert!(!FsrFrame::is_border(2, 3));
    }
}
